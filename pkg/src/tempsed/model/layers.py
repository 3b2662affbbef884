"""Layer primitives with manual reverse-mode gradients.

Activations are channels-last (batch, time, frequency, channels). The 3x3
convolution is computed as nine shifted matmuls, which keeps peak memory at a
few copies of the activation instead of an im2col buffer. Each forward returns
whatever its backward needs and nothing more.
"""

from __future__ import annotations

import numpy as np

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 stride-1 convolution. x (N,T,F,Ci), w (3,3,Ci,Co)."""
    n, t, f, ci = x.shape
    co = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.empty((n, t, f, co), dtype=x.dtype)
    out[:] = b
    for dt in range(3):
        for df in range(3):
            patch = xp[:, dt : dt + t, df : df + f, :].reshape(-1, ci)
            out += (patch @ w[dt, df]).reshape(n, t, f, co)
    return out


def conv3x3_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, t, f, ci = x.shape
    co = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dxp = np.zeros_like(xp)
    go = grad_out.reshape(-1, co)
    dw = np.empty_like(w)
    for dt in range(3):
        for df in range(3):
            patch = xp[:, dt : dt + t, df : df + f, :].reshape(-1, ci)
            dw[dt, df] = patch.T @ go
            dxp[:, dt : dt + t, df : df + f, :] += (go @ w[dt, df].T).reshape(n, t, f, ci)
    db = grad_out.sum(axis=(0, 1, 2))
    return np.ascontiguousarray(dxp[:, 1 : t + 1, 1 : f + 1, :]), dw, db


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
):
    """Per-channel normalization over (batch, time, frequency).

    Training uses biased batch statistics and proposes running-stat updates;
    committing them is the caller's job (the forward stays pure). Eval uses
    the running stats as constants.

    Returns (y, cache, updates) where updates is None outside training.
    """
    if training:
        mu = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv
        updates = (
            (1.0 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mu,
            (1.0 - BN_MOMENTUM) * running_var + BN_MOMENTUM * var,
        )
        cache = (xhat, inv, gamma)
        return gamma * xhat + beta, cache, updates
    inv = 1.0 / np.sqrt(running_var + BN_EPS)
    xhat = (x - running_mean) * inv
    return gamma * xhat + beta, (xhat, inv, gamma), None


def batchnorm_backward(grad_out: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients through training-mode batch statistics."""
    xhat, inv, gamma = cache
    count = grad_out.size // grad_out.shape[-1]
    dgamma = (grad_out * xhat).sum(axis=(0, 1, 2))
    dbeta = grad_out.sum(axis=(0, 1, 2))
    dxhat = grad_out * gamma
    dx = (inv / count) * (
        count * dxhat
        - dxhat.sum(axis=(0, 1, 2))
        - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
    )
    return dx, dgamma, dbeta


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y = np.maximum(x, 0.0)
    return y, y > 0


def relu_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return grad_out * mask


def dropout_forward(
    x: np.ndarray, rate: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Inverted per-element dropout; the mask is returned so the backward pass
    (and finite-difference re-runs seeded identically) reuse it."""
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return grad_out * mask


def avgpool_forward(x: np.ndarray, kt: int, kf: int) -> np.ndarray:
    """Non-overlapping average pooling with kernel = stride = (kt, kf)."""
    if kt == 1 and kf == 1:
        return x
    n, t, f, c = x.shape
    if t % kt or f % kf:
        raise ValueError(f"pool ({kt},{kf}) does not divide activation ({t},{f})")
    return x.reshape(n, t // kt, kt, f // kf, kf, c).mean(axis=(2, 4))


def avgpool_backward(grad_out: np.ndarray, kt: int, kf: int) -> np.ndarray:
    if kt == 1 and kf == 1:
        return grad_out
    n, t2, f2, c = grad_out.shape
    spread = grad_out[:, :, None, :, None, :] / (kt * kf)
    return np.broadcast_to(spread, (n, t2, kt, f2, kf, c)).reshape(n, t2 * kt, f2 * kf, c)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out

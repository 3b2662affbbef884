"""Full network assembly: conv stack, BiGRU, head, and aggregation.

Modes:
  train   - dropout on, batch-norm on batch statistics (updates proposed in
            the cache, committed by the training step)
  eval    - dropout off, running batch-norm statistics
  teacher - dropout on, running batch-norm statistics, no updates; this is
            how the EMA teacher mirrors the student's stochasticity

Batch functions operate on (N, T, F) stacks; ``forward`` wraps one clip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..features import SpectralMap
from .config import ModelConfig
from .gru import bigru_backward, bigru_forward
from .layers import (
    avgpool_backward,
    avgpool_forward,
    batchnorm_backward,
    batchnorm_forward,
    conv3x3_backward,
    conv3x3_forward,
    dropout_backward,
    dropout_forward,
    relu_backward,
    relu_forward,
    sigmoid,
)
from .params import Parameters, is_trainable

MODES = ("train", "eval", "teacher")


@dataclass
class ForwardOutput:
    """Single-clip result: frame_probs (T', C), clip_probs (C,), and the
    activation cache when one was requested."""

    frame_probs: np.ndarray
    clip_probs: np.ndarray
    cache: dict | None = None


def linear_softmax_pool(probs: np.ndarray, axis: int = -2) -> np.ndarray:
    """Aggregate frame probabilities to clip probabilities: sum(p^2)/sum(p).

    A convex combination of the frame values weighted by themselves, so the
    result lies between min and max over active frames; all-zero frames give 0.
    """
    total = probs.sum(axis=axis)
    square = (probs * probs).sum(axis=axis)
    return np.where(total > 0, square / np.where(total > 0, total, 1.0), 0.0)


def linear_softmax_pool_backward(
    probs: np.ndarray, grad_out: np.ndarray, axis: int = -2
) -> np.ndarray:
    """d clip_c / d p_tc = (2 p_tc sum(p) - sum(p^2)) / sum(p)^2."""
    total = probs.sum(axis=axis, keepdims=True)
    square = (probs * probs).sum(axis=axis, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    local = (2.0 * probs * total - square) / (safe * safe)
    local = np.where(total > 0, local, 0.0)
    return local * np.expand_dims(grad_out, axis)


def _pad_time(x: np.ndarray, factor: int) -> np.ndarray:
    t = x.shape[1]
    t_pad = -(-t // factor) * factor
    if t_pad == t:
        return x
    tail = np.repeat(x[:, -1:], t_pad - t, axis=1)
    return np.concatenate([x, tail], axis=1)


def forward_batch(
    x: np.ndarray,
    params: Parameters,
    config: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    want_cache: bool = False,
):
    """Run a batch (N, T, F) through the network.

    Returns (frame_probs (N, T', C), clip_probs (N, C), cache). T is padded by
    edge replication to a multiple of 2^x, so T' = ceil(T / 2^x).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected (batch, time, bins) input, got shape {x.shape}")
    if x.shape[2] != config.num_mel_bins:
        raise ValueError(f"expected {config.num_mel_bins} mel bins, got {x.shape[2]}")
    if x.shape[1] < config.temporal_factor:
        raise ValueError(
            f"need at least {config.temporal_factor} frames for x="
            f"{config.temporal_pool_layers}, got {x.shape[1]}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in model input")
    use_dropout = mode in ("train", "teacher") and config.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError(f"mode {mode!r} needs an rng for dropout masks")

    h = _pad_time(x, config.temporal_factor)[..., None]
    training_bn = mode == "train"
    blocks = []
    bn_updates: dict[str, np.ndarray] = {}
    for b, (tp, fp) in enumerate(config.pool_factors()):
        conv_in = h
        h = conv3x3_forward(h, params[f"block{b}.conv.w"], params[f"block{b}.conv.b"])
        h, bn_cache, updates = batchnorm_forward(
            h,
            params[f"block{b}.bn.gamma"],
            params[f"block{b}.bn.beta"],
            params[f"block{b}.bn.running_mean"],
            params[f"block{b}.bn.running_var"],
            training=training_bn,
        )
        if updates is not None:
            bn_updates[f"block{b}.bn.running_mean"] = updates[0]
            bn_updates[f"block{b}.bn.running_var"] = updates[1]
        h, relu_mask = relu_forward(h)
        if use_dropout:
            h, drop_mask = dropout_forward(h, config.dropout_rate, rng)
        else:
            drop_mask = None
        h = avgpool_forward(h, tp, fp)
        if want_cache:
            blocks.append(
                {"conv_in": conv_in, "bn": bn_cache, "relu": relu_mask,
                 "drop": drop_mask, "pool": (tp, fp)}
            )
    if h.shape[2] != 1:
        raise ValueError(f"frequency axis did not collapse to 1, got {h.shape[2]}")
    h = h[:, :, 0, :]

    layer_params = [
        {k: params[f"gru{layer}.{k}"] for k in
         ("fw.wi", "fw.wh", "fw.b", "bw.wi", "bw.wh", "bw.b")}
        for layer in range(config.gru_layers)
    ]
    h, gru_caches = bigru_forward(h, layer_params, want_cache)

    logits = h.reshape(-1, h.shape[2]) @ params["head.w"] + params["head.b"]
    frame_probs = sigmoid(logits).reshape(h.shape[0], h.shape[1], -1)
    clip_probs = linear_softmax_pool(frame_probs, axis=1)

    cache = None
    if want_cache:
        cache = {
            "mode": mode,
            "blocks": blocks,
            "gru": gru_caches,
            "gru_out": h,
            "frame_probs": frame_probs,
            "bn_updates": bn_updates,
        }
    return frame_probs, clip_probs, cache


def backward_batch(
    cache: dict | None,
    grad_frame: np.ndarray,
    grad_clip: np.ndarray,
    params: Parameters,
    config: ModelConfig,
) -> dict[str, np.ndarray]:
    """Exact gradients of the forward pass w.r.t. every trainable parameter.

    grad_frame is (N, T', C) upstream gradient on frame_probs, grad_clip
    (N, C) on clip_probs; both routes combine through the aggregation rule.
    """
    if cache is None:
        raise ValueError("backward requires the cache from a train-mode forward")
    if cache["mode"] != "train":
        raise ValueError(f"backward expects a train-mode cache, got {cache['mode']!r}")
    frame_probs = cache["frame_probs"]
    dprobs = grad_frame + linear_softmax_pool_backward(frame_probs, grad_clip, axis=1)
    dlogits = dprobs * frame_probs * (1.0 - frame_probs)

    grads: dict[str, np.ndarray] = {}
    gru_out = cache["gru_out"]
    flat = dlogits.reshape(-1, dlogits.shape[2])
    grads["head.w"] = gru_out.reshape(-1, gru_out.shape[2]).T @ flat
    grads["head.b"] = flat.sum(axis=0)
    dh = (flat @ params["head.w"].T).reshape(gru_out.shape)

    layer_params = [
        {k: params[f"gru{layer}.{k}"] for k in
         ("fw.wi", "fw.wh", "fw.b", "bw.wi", "bw.wh", "bw.b")}
        for layer in range(config.gru_layers)
    ]
    dh, gru_grads = bigru_backward(dh, cache["gru"], layer_params)
    grads.update(gru_grads)

    dh = dh[:, :, None, :]
    for b in range(config.num_blocks - 1, -1, -1):
        block = cache["blocks"][b]
        tp, fp = block["pool"]
        dh = avgpool_backward(dh, tp, fp)
        if block["drop"] is not None:
            dh = dropout_backward(dh, block["drop"])
        dh = relu_backward(dh, block["relu"])
        dh, dgamma, dbeta = batchnorm_backward(dh, block["bn"])
        grads[f"block{b}.bn.gamma"] = dgamma
        grads[f"block{b}.bn.beta"] = dbeta
        dh, dw, db = conv3x3_backward(block["conv_in"], params[f"block{b}.conv.w"], dh)
        grads[f"block{b}.conv.w"] = dw
        grads[f"block{b}.conv.b"] = db

    assert all(is_trainable(name) for name in grads)
    return grads


def forward(
    spec,
    params: Parameters,
    config: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    want_cache: bool = False,
) -> ForwardOutput:
    """Single-clip forward. ``spec`` is a SpectralMap or a (T, F) array."""
    frames = spec.frames if isinstance(spec, SpectralMap) else np.asarray(spec)
    if frames.ndim != 2:
        raise ValueError(f"expected (time, bins) input, got shape {frames.shape}")
    frame_probs, clip_probs, cache = forward_batch(
        frames[None], params, config, mode=mode, rng=rng, want_cache=want_cache
    )
    return ForwardOutput(frame_probs[0], clip_probs[0], cache)

"""Bidirectional GRU with hand-written backpropagation through time.

Cho-variant cell with a single bias per gate, gates packed as (reset, update,
candidate) along the last axis:

    r = sigmoid(x Wr + h Ur + br)
    z = sigmoid(x Wz + h Uz + bz)
    n = tanh(x Wn + (r * h) Un + bn)
    h' = (1 - z) * n + z * h

The input projection for all timesteps is one matmul; the recurrence loops
over time. Initial hidden state is zero.
"""

from __future__ import annotations

import numpy as np

from .layers import sigmoid


def gru_direction_forward(
    x: np.ndarray, wi: np.ndarray, wh: np.ndarray, b: np.ndarray, reverse: bool
):
    """One direction over x (N, T, I); returns (h_seq (N, T, H), cache)."""
    n, t, i = x.shape
    h_dim = wh.shape[0]
    pre = (x.reshape(-1, i) @ wi + b).reshape(n, t, 3 * h_dim)
    h = np.zeros((n, h_dim), dtype=x.dtype)
    h_seq = np.empty((n, t, h_dim), dtype=x.dtype)
    r_seq = np.empty_like(h_seq)
    z_seq = np.empty_like(h_seq)
    n_seq = np.empty_like(h_seq)
    hprev_seq = np.empty_like(h_seq)
    order = range(t - 1, -1, -1) if reverse else range(t)
    for step in order:
        gates = pre[:, step]
        rz = sigmoid(gates[:, : 2 * h_dim] + h @ wh[:, : 2 * h_dim])
        r, z = rz[:, :h_dim], rz[:, h_dim:]
        cand = np.tanh(gates[:, 2 * h_dim :] + (r * h) @ wh[:, 2 * h_dim :])
        hprev_seq[:, step] = h
        h = (1.0 - z) * cand + z * h
        h_seq[:, step] = h
        r_seq[:, step] = r
        z_seq[:, step] = z
        n_seq[:, step] = cand
    cache = (x, wi, wh, r_seq, z_seq, n_seq, hprev_seq, reverse)
    return h_seq, cache


def gru_direction_backward(grad_h_seq: np.ndarray, cache):
    """Returns (dx, dwi, dwh, db) for one direction."""
    x, wi, wh, r_seq, z_seq, n_seq, hprev_seq, reverse = cache
    n, t, i = x.shape
    h_dim = wh.shape[0]
    wh_rz = wh[:, : 2 * h_dim]
    wh_n = wh[:, 2 * h_dim :]
    dpre = np.empty((n, t, 3 * h_dim), dtype=x.dtype)
    dwh = np.zeros_like(wh)
    dh = np.zeros((n, h_dim), dtype=x.dtype)
    order = range(t) if reverse else range(t - 1, -1, -1)
    for step in order:
        dh_total = grad_h_seq[:, step] + dh
        r, z = r_seq[:, step], z_seq[:, step]
        cand, hp = n_seq[:, step], hprev_seq[:, step]
        dcand = dh_total * (1.0 - z)
        dz = dh_total * (hp - cand)
        da_n = dcand * (1.0 - cand * cand)
        drh = da_n @ wh_n.T
        dr = drh * hp
        da_r = dr * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        da_rz = np.concatenate([da_r, da_z], axis=1)
        dpre[:, step, : 2 * h_dim] = da_rz
        dpre[:, step, 2 * h_dim :] = da_n
        dwh[:, : 2 * h_dim] += hp.T @ da_rz
        dwh[:, 2 * h_dim :] += (r * hp).T @ da_n
        dh = dh_total * z + drh * r + da_rz @ wh_rz.T
    dpre_flat = dpre.reshape(-1, 3 * h_dim)
    dwi = x.reshape(-1, i).T @ dpre_flat
    db = dpre_flat.sum(axis=0)
    dx = (dpre_flat @ wi.T).reshape(n, t, i)
    return dx, dwi, dwh, db


def bigru_forward(x: np.ndarray, layer_params: list[dict], want_cache: bool = False):
    """Stack of bidirectional layers; outputs of the two directions are
    concatenated, so every layer after the first sees 2H features.

    layer_params: one dict per layer with keys fw.wi, fw.wh, fw.b, bw.wi,
    bw.wh, bw.b.
    """
    caches = [] if want_cache else None
    h = x
    for lp in layer_params:
        fw, fw_cache = gru_direction_forward(h, lp["fw.wi"], lp["fw.wh"], lp["fw.b"], False)
        bw, bw_cache = gru_direction_forward(h, lp["bw.wi"], lp["bw.wh"], lp["bw.b"], True)
        h = np.concatenate([fw, bw], axis=2)
        if want_cache:
            caches.append((fw_cache, bw_cache))
    return h, caches


def bigru_backward(grad_out: np.ndarray, caches, layer_params: list[dict]):
    """Returns (dx, grads) with grads keyed like layer_params entries,
    prefixed gru{layer}."""
    grads: dict[str, np.ndarray] = {}
    grad = grad_out
    h_dim = layer_params[0]["fw.wh"].shape[0]
    for layer in range(len(layer_params) - 1, -1, -1):
        fw_cache, bw_cache = caches[layer]
        dfw = grad[:, :, :h_dim]
        dbw = grad[:, :, h_dim:]
        dx_fw, dwi_fw, dwh_fw, db_fw = gru_direction_backward(dfw, fw_cache)
        dx_bw, dwi_bw, dwh_bw, db_bw = gru_direction_backward(dbw, bw_cache)
        grads[f"gru{layer}.fw.wi"] = dwi_fw
        grads[f"gru{layer}.fw.wh"] = dwh_fw
        grads[f"gru{layer}.fw.b"] = db_fw
        grads[f"gru{layer}.bw.wi"] = dwi_bw
        grads[f"gru{layer}.bw.wh"] = dwh_bw
        grads[f"gru{layer}.bw.b"] = db_bw
        grad = dx_fw + dx_bw
    return grad, grads

"""Parameter initialization, counting, and the TPMD1 checkpoint format.

Parameters live in a plain dict mapping name to array, in a declaration order
fixed by parameter_shapes. Batch-norm running statistics travel with the
parameters (the EMA teacher needs them) but are not trainable.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .config import ModelConfig

CHECKPOINT_MAGIC = b"TPMD1"

Parameters = dict[str, np.ndarray]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape in declaration order; the single source of truth shared
    by init, checkpoints, and gradient bookkeeping."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 1
    for b, cout in enumerate(config.conv_channels):
        shapes[f"block{b}.conv.w"] = (3, 3, cin, cout)
        shapes[f"block{b}.conv.b"] = (cout,)
        for stat in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"block{b}.bn.{stat}"] = (cout,)
        cin = cout
    h = config.gru_hidden
    in_dim = config.conv_channels[-1]
    for layer in range(config.gru_layers):
        for direction in ("fw", "bw"):
            shapes[f"gru{layer}.{direction}.wi"] = (in_dim, 3 * h)
            shapes[f"gru{layer}.{direction}.wh"] = (h, 3 * h)
            shapes[f"gru{layer}.{direction}.b"] = (3 * h,)
        in_dim = 2 * h
    shapes["head.w"] = (2 * h, config.num_classes)
    shapes["head.b"] = (config.num_classes,)
    return shapes


def is_trainable(name: str) -> bool:
    return not name.endswith((".running_mean", ".running_var"))


def parameter_count(config: ModelConfig, trainable_only: bool = True) -> int:
    return sum(
        int(np.prod(shape))
        for name, shape in parameter_shapes(config).items()
        if is_trainable(name) or not trainable_only
    )


def init_parameters(config: ModelConfig, seed: int, dtype=np.float32) -> Parameters:
    """Deterministic per seed. Conv and linear weights are Glorot uniform
    (kernel taps count toward the fans), GRU weights and biases uniform in
    ±sqrt(1/hidden), batch-norm starts at identity with running stats (0, 1)."""
    rng = np.random.default_rng(seed)
    h = config.gru_hidden
    params: Parameters = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("conv.w"):
            fan_in = 9 * shape[2]
            fan_out = 9 * shape[3]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-limit, limit, size=shape)
        elif name == "head.w":
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        elif name.startswith("gru"):
            limit = np.sqrt(1.0 / h)
            value = rng.uniform(-limit, limit, size=shape)
        elif name.endswith((".gamma", ".running_var")):
            value = np.ones(shape)
        else:  # conv biases, bn beta, running mean, head bias
            value = np.zeros(shape)
        params[name] = value.astype(dtype)
    return params


def serialize_checkpoint(params: Parameters, config: ModelConfig) -> bytes:
    """Magic TPMD1, config header, then flat little-endian float32 tensors in
    declaration order (shapes are recomputed from the config on load)."""
    shapes = parameter_shapes(config)
    missing = [n for n in shapes if n not in params]
    if missing:
        raise ValueError(f"checkpoint missing tensors: {missing}")
    chunks = [CHECKPOINT_MAGIC]
    chunks.append(
        struct.pack(
            "<II",
            config.temporal_pool_layers,
            len(config.conv_channels),
        )
    )
    chunks.append(struct.pack(f"<{len(config.conv_channels)}I", *config.conv_channels))
    chunks.append(
        struct.pack(
            "<dIIII",
            config.dropout_rate,
            config.gru_hidden,
            config.gru_layers,
            config.num_classes,
            config.num_mel_bins,
        )
    )
    chunks.append(struct.pack("<I", len(shapes)))
    for name, shape in shapes.items():
        tensor = np.asarray(params[name])
        if tensor.shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {tensor.shape}")
        chunks.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return b"".join(chunks)


def parse_checkpoint(data: bytes) -> tuple[Parameters, ModelConfig]:
    pos = 0

    def take(count: int) -> bytes:
        nonlocal pos
        if pos + count > len(data):
            raise ValueError(f"truncated checkpoint at byte {pos}")
        out = data[pos : pos + count]
        pos += count
        return out

    magic = take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    x, n_blocks = struct.unpack("<II", take(8))
    channels = struct.unpack(f"<{n_blocks}I", take(4 * n_blocks))
    dropout, gru_hidden, gru_layers, num_classes, num_mel_bins = struct.unpack(
        "<dIIII", take(24)
    )
    config = ModelConfig(
        temporal_pool_layers=x,
        conv_channels=channels,
        dropout_rate=dropout,
        gru_hidden=gru_hidden,
        gru_layers=gru_layers,
        num_classes=num_classes,
        num_mel_bins=num_mel_bins,
    )
    shapes = parameter_shapes(config)
    (count,) = struct.unpack("<I", take(4))
    if count != len(shapes):
        raise ValueError(f"checkpoint declares {count} tensors, config needs {len(shapes)}")
    params: Parameters = {}
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        params[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes after checkpoint payload")
    return params, config


def save_checkpoint(path, params: Parameters, config: ModelConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_checkpoint(params, config))


def load_checkpoint(path) -> tuple[Parameters, ModelConfig]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def clone_parameters(params: Mapping[str, np.ndarray]) -> Parameters:
    return {name: np.array(value, copy=True) for name, value in params.items()}

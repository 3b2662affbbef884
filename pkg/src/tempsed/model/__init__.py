"""CRNN with configurable temporal pooling, in plain numpy.

Forward and reverse-mode passes are hand-written; parameters are a flat dict
of arrays so the optimizer and EMA teacher can treat them uniformly.
"""

from .config import ModelConfig, tiny_config
from .network import (
    ForwardOutput,
    backward_batch,
    forward,
    forward_batch,
    linear_softmax_pool,
    linear_softmax_pool_backward,
)
from .params import (
    CHECKPOINT_MAGIC,
    Parameters,
    clone_parameters,
    init_parameters,
    is_trainable,
    load_checkpoint,
    parameter_count,
    parameter_shapes,
    parse_checkpoint,
    save_checkpoint,
    serialize_checkpoint,
)

__all__ = [
    "CHECKPOINT_MAGIC",
    "ForwardOutput",
    "ModelConfig",
    "Parameters",
    "backward_batch",
    "clone_parameters",
    "forward",
    "forward_batch",
    "init_parameters",
    "is_trainable",
    "linear_softmax_pool",
    "linear_softmax_pool_backward",
    "load_checkpoint",
    "parameter_count",
    "parameter_shapes",
    "parse_checkpoint",
    "save_checkpoint",
    "serialize_checkpoint",
    "tiny_config",
]

from .checkpoint import (
    CheckpointError,
    CorruptHeaderError,
    ShapeMismatchError,
    TruncatedPayloadError,
    checkpoint_load,
    checkpoint_save,
    load_tensors,
    save_tensors,
)
from .functional import attention, multi_head_attention, track_attention
from .gradcheck import grad_check
from .params import ParamStore, adam_step, cosine_lr
from .rng import Rng
from .tensor import NonFiniteError, Tensor, cross_entropy, mse, no_grad

__all__ = [
    "CheckpointError",
    "CorruptHeaderError",
    "NonFiniteError",
    "ParamStore",
    "Rng",
    "ShapeMismatchError",
    "Tensor",
    "TruncatedPayloadError",
    "adam_step",
    "attention",
    "checkpoint_load",
    "checkpoint_save",
    "cosine_lr",
    "cross_entropy",
    "grad_check",
    "load_tensors",
    "mse",
    "multi_head_attention",
    "no_grad",
    "save_tensors",
    "track_attention",
]

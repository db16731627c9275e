from . import functional
from .checkpoint import CheckpointFormatError, load_tensors, save_tensors
from .functional import (
    concat_last_axis,
    conv2d_same,
    cosine_similarity,
    dense,
    flatten,
    global_avg_pool,
    leaky_relu,
    maxpool2d,
    relu,
    sigmoid,
    unflatten,
)
from .params import ParamStore, adam_step, seeded_init
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    backward,
    build_tape,
    float64_mode,
    no_grad,
)

__all__ = [
    "CheckpointFormatError",
    "ContractError",
    "DimensionError",
    "ParamStore",
    "Tensor",
    "adam_step",
    "backward",
    "build_tape",
    "concat_last_axis",
    "conv2d_same",
    "cosine_similarity",
    "dense",
    "flatten",
    "float64_mode",
    "functional",
    "global_avg_pool",
    "leaky_relu",
    "load_tensors",
    "maxpool2d",
    "no_grad",
    "relu",
    "save_tensors",
    "seeded_init",
    "sigmoid",
    "unflatten",
]

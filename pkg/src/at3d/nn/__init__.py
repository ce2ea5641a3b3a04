from . import functional
from .functional import conv3d, conv3d_naive_oracle, cross_entropy, midplanes
from .layers import (
    BatchNorm3d,
    Conv3d,
    Dropout,
    LayerNorm,
    Linear,
    ReLU,
    global_avg_pool,
    pool_linear_dropout,
)
from .module import Module, Sequential

__all__ = [
    "BatchNorm3d",
    "Conv3d",
    "Dropout",
    "LayerNorm",
    "Linear",
    "Module",
    "ReLU",
    "Sequential",
    "conv3d",
    "conv3d_naive_oracle",
    "cross_entropy",
    "functional",
    "global_avg_pool",
    "midplanes",
    "pool_linear_dropout",
]

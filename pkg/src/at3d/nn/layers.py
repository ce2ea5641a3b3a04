from __future__ import annotations

import math

import numpy as np

from .. import rng
from ..errors import ShapeError
from ..tensor import Tensor, reduce, relu, tensor_new, zeros
from . import functional as F
from .module import Module


class Conv3d(Module):
    """3-D cross-correlation layer, weight ``[out, in, kt, kh, kw]``."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, bias=False):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = F._triple(kernel)
        self.stride = F._triple(stride)
        self.padding = F._triple(padding)
        self.weight = zeros((out_channels, in_channels) + self.kernel, requires_grad=True)
        self.bias = zeros((out_channels,), requires_grad=True) if bias else None

    def reset_parameters(self, seed: rng.SeedLike) -> None:
        fan_in = self.in_channels * math.prod(self.kernel)
        self.weight.data = tensor_new(
            self.weight.shape, "kaiming", seed=seed, fan_in=fan_in, dtype=self.weight.dtype
        ).data
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def output_shape(self, shape):
        if shape[1] != self.in_channels:
            raise ShapeError(f"Conv3d expects {self.in_channels} channels, got {shape[1]}")
        return F.conv3d_output_shape(shape, self.out_channels, self.kernel, self.stride, self.padding)

    def forward(self, x):
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def __repr__(self):
        return f"Conv3d({self.in_channels}, {self.out_channels}, k={self.kernel}, s={self.stride}, p={self.padding})"


class BatchNorm3d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.scale = tensor_new((channels,), "ones", requires_grad=True)
        self.shift = zeros((channels,), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def output_shape(self, shape):
        if shape[1] != self.channels:
            raise ShapeError(f"BatchNorm3d expects {self.channels} channels, got {shape[1]}")
        return shape

    def forward(self, x):
        return F.batch_norm(
            x, self.scale, self.shift, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = zeros((out_features, in_features), requires_grad=True)
        self.bias = zeros((out_features,), requires_grad=True) if bias else None

    def reset_parameters(self, seed: rng.SeedLike) -> None:
        self.weight.data = tensor_new(
            self.weight.shape, "kaiming", seed=seed, fan_in=self.in_features, dtype=self.weight.dtype
        ).data
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.scale = tensor_new((features,), "ones", requires_grad=True)
        self.shift = zeros((features,), requires_grad=True)

    def forward(self, x):
        return F.layer_norm(x, self.scale, self.shift, self.eps)


class ReLU(Module):
    def forward(self, x):
        return relu(x)

    def output_shape(self, shape):
        return shape


class Dropout(Module):
    """Inverted dropout.  ``gen`` supplies the masks; the training loop
    reseeds it per step so runs are reproducible."""

    def __init__(self, p: float = 0.4, seed: rng.SeedLike = 0):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.gen = rng.stream(seed, rng.DROPOUT)

    def forward(self, x):
        return F.dropout(x, self.p, self.training, self.gen)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, T, H, W] -> [N, C]"""
    return reduce(x, (2, 3, 4), "mean")


def pool_linear_dropout(x: Tensor, fc: Linear, drop: Dropout, mode: str | None = None) -> Tensor:
    """Classifier head: global average pool, dropout, fully connected."""
    if x.ndim != 5:
        raise ShapeError(f"expected [N, C, T, H, W], got {x.shape}")
    if x.shape[1] != fc.in_features:
        raise ShapeError(f"fc expects {fc.in_features} channels, got {x.shape[1]}")
    if mode is not None:
        drop.train(mode == "train")
    return fc(drop(global_avg_pool(x)))

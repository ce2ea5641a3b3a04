"""Attention blocks inserted into the video backbones.

All blocks map ``[N, C, T, H, W]`` to the same shape.
"""

from __future__ import annotations

import math

import numpy as np

from . import rng
from .errors import ConfigError, ShapeError
from .nn import functional as F
from .nn.layers import Conv3d, LayerNorm, Linear
from .nn.module import Module
from .tensor import (
    Tensor,
    add,
    concat,
    matmul,
    mul,
    pad,
    permute,
    reduce,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
)


def _check_channels(x: Tensor, channels: int, name: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{name} expects [N, C, T, H, W], got {x.shape}")
    if x.shape[1] != channels:
        raise ShapeError(f"{name} built for {channels} channels, got {x.shape[1]}")


class SEBlock(Module):
    """Squeeze-and-excitation: per-channel sigmoid gate computed from the
    global mean of each channel."""

    def __init__(self, channels: int, reduction: int = 2):
        super().__init__()
        self.channels = channels
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden)
        self.fc2 = Linear(hidden, channels)

    def gate(self, x: Tensor) -> Tensor:
        s = reduce(x, (2, 3, 4), "mean")
        return sigmoid(self.fc2(relu(self.fc1(s))))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "SEBlock")
        g = self.gate(x)
        return mul(x, reshape(g, g.shape + (1, 1, 1)))

    def output_shape(self, shape):
        return shape

    @staticmethod
    def param_count(channels: int, reduction: int = 2) -> int:
        h = max(1, channels // reduction)
        return channels * h + h + h * channels + channels


class CBAMBlock(Module):
    """Channel attention (shared bias-free MLP over average- and max-pooled
    descriptors) followed by spatial attention (a single conv over the
    channel-mean and channel-max maps)."""

    def __init__(self, channels: int, reduction: int = 16, kernel=(7, 7, 7)):
        super().__init__()
        self.channels = channels
        hidden = max(1, channels // reduction)
        self.mlp1 = Linear(channels, hidden, bias=False)
        self.mlp2 = Linear(hidden, channels, bias=False)
        kernel = F._triple(kernel)
        self.spatial = Conv3d(2, 1, kernel, padding=tuple(k // 2 for k in kernel), bias=True)

    def _mlp(self, v: Tensor) -> Tensor:
        return self.mlp2(relu(self.mlp1(v)))

    def channel_gate(self, x: Tensor) -> Tensor:
        avg = reduce(x, (2, 3, 4), "mean")
        mx = reduce(x, (2, 3, 4), "max")
        g = sigmoid(add(self._mlp(avg), self._mlp(mx)))
        return reshape(g, g.shape + (1, 1, 1))

    def spatial_gate(self, x: Tensor) -> Tensor:
        maps = concat([reduce(x, 1, "mean", keepdims=True), reduce(x, 1, "max", keepdims=True)], 1)
        return sigmoid(self.spatial(maps))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "CBAMBlock")
        x = mul(x, self.channel_gate(x))
        return mul(x, self.spatial_gate(x))

    def output_shape(self, shape):
        return shape

    @staticmethod
    def param_count(channels: int, reduction: int = 16, kernel=(7, 7, 7)) -> int:
        h = max(1, channels // reduction)
        return 2 * channels * h + 2 * math.prod(F._triple(kernel)) + 1


def _sinusoid(length: int, dim: int, dtype) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


class MultiHeadAttn(Module):
    """Residual multi-head self-attention over frame tokens (``temporal``:
    every spatial position attends across T) or position tokens
    (``spatial``: every frame attends across H*W)."""

    def __init__(
        self,
        channels: int,
        heads: int = 4,
        mode: str = "temporal",
        layer_norm: bool = False,
        positional: bool = False,
    ):
        super().__init__()
        if mode not in ("temporal", "spatial"):
            raise ConfigError(f"unknown attention mode {mode!r}")
        if channels % heads:
            raise ConfigError(f"{heads} heads do not divide {channels} channels")
        self.channels = channels
        self.heads = heads
        self.mode = mode
        self.positional = positional
        self.norm = LayerNorm(channels) if layer_norm else None
        self.q = Linear(channels, channels)
        self.k = Linear(channels, channels)
        self.v = Linear(channels, channels)
        self.o = Linear(channels, channels)
        self.last_weights: np.ndarray | None = None

    def _tokens(self, x: Tensor) -> tuple[Tensor, tuple]:
        N, C, T, H, W = x.shape
        if self.mode == "temporal":
            # [N, H, W, T, C] -> [N*H*W, T, C]
            t = permute(x, (0, 3, 4, 2, 1))
            return reshape(t, (N * H * W, T, C)), (N, H, W, T, C)
        t = permute(x, (0, 2, 3, 4, 1))
        return reshape(t, (N * T, H * W, C)), (N, T, H, W, C)

    def _untokens(self, y: Tensor, folded: tuple) -> Tensor:
        y = reshape(y, folded)
        if self.mode == "temporal":
            return permute(y, (0, 4, 3, 1, 2))
        return permute(y, (0, 4, 1, 2, 3))

    def attend(self, tokens: Tensor) -> Tensor:
        """Multi-head attention on ``[B, L, C]`` tokens (no residual)."""
        B, L, C = tokens.shape
        h, d = self.heads, C // self.heads
        if self.positional:
            tokens = add(tokens, Tensor(_sinusoid(L, C, tokens.dtype)))
        if self.norm is not None:
            tokens = self.norm(tokens)

        def split(t):
            return permute(reshape(t, (B, L, h, d)), (0, 2, 1, 3))

        q, k, v = split(self.q(tokens)), split(self.k(tokens)), split(self.v(tokens))
        scores = scale(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        weights = softmax(scores, -1)
        self.last_weights = weights.data
        out = permute(matmul(weights, v), (0, 2, 1, 3))
        return self.o(reshape(out, (B, L, C)))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "MultiHeadAttn")
        tokens, folded = self._tokens(x)
        return add(x, self._untokens(self.attend(tokens), folded))

    def output_shape(self, shape):
        return shape

    @staticmethod
    def param_count(channels: int, layer_norm: bool = False) -> int:
        return 4 * (channels * channels + channels) + (2 * channels if layer_norm else 0)


class TCNBlock(Module):
    """Causal temporal convolution (kernel 3, left padding 2) with ReLU and
    an identity residual: ``x + relu(conv(x))``."""

    def __init__(self, channels: int, kernel: int = 3, dilation: int = 1):
        super().__init__()
        if dilation != 1:
            raise ConfigError("only dilation 1 is supported")
        self.channels = channels
        self.kernel = kernel
        self.conv = Conv3d(channels, channels, (kernel, 1, 1), bias=True)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "TCNBlock")
        shifted = pad(x, ((0, 0), (0, 0), (self.kernel - 1, 0), (0, 0), (0, 0)))
        return add(x, relu(self.conv(shifted)))

    def output_shape(self, shape):
        return shape

    @staticmethod
    def param_count(channels: int, kernel: int = 3) -> int:
        return kernel * channels * channels + channels


def block_param_count(block: Module) -> int:
    """Exact number of learnable scalars in ``block``."""
    return block.num_parameters()


def init_block(block: Module, seed: rng.SeedLike) -> None:
    """Kaiming-initialise every conv/linear inside ``block``."""
    root = seed if isinstance(seed, tuple) else (seed,)
    for i, (_, m) in enumerate(block.named_modules()):
        if hasattr(m, "reset_parameters"):
            m.reset_parameters(root + (i,))

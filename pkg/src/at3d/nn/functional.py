"""Differentiable layer kernels on top of :mod:`at3d.tensor`."""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import GeometryError, LabelError, ShapeError
from ..tensor import Tensor, _result, add, matmul, mul

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


def output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    """floor((size + 2*padding - kernel) / stride) + 1"""
    return (size + 2 * padding - kernel) // stride + 1


def conv3d_output_shape(in_shape, out_channels, kernel, stride, padding):
    n, _, *spatial = in_shape
    dims = tuple(
        output_extent(s, k, st, p) for s, k, st, p in zip(spatial, kernel, stride, padding)
    )
    if any(d < 1 for d in dims):
        raise GeometryError(
            f"empty conv output: input {tuple(spatial)}, kernel {kernel}, "
            f"stride {stride}, padding {padding}"
        )
    return (n, out_channels) + dims


def midplanes(t: int, d: int, n_in: int, n_out: int) -> int:
    """Hidden width of a (1,d,d)+(t,1,1) pair sized to match a full
    (t,d,d) convolution's parameter count."""
    return (t * d * d * n_in * n_out) // (d * d * n_in + t * n_out)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Direct 3-D cross-correlation.

    x: [N, C_in, T, H, W], weight: [C_out, C_in, kt, kh, kw].
    """
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d needs rank-5 input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape[1]}, weight {weight.shape[1]}")
    kernel = weight.shape[2:]
    out_shape = conv3d_output_shape(x.shape, weight.shape[0], kernel, stride, padding)
    _, _, To, Ho, Wo = out_shape
    st, sh, sw = stride
    pt, ph, pw = padding

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))) if any(padding) else x.data
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw][
        :, :, :To, :Ho, :Wo
    ]
    wd = weight.data
    # [N, To, Ho, Wo, C_out]
    y = np.tensordot(win, wd, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    y = np.ascontiguousarray(y.transpose(0, 4, 1, 2, 3))
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1, 1)
        parents += (bias,)

    need_x = x.requires_grad

    def back(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gx = None
        if need_x:
            # [N, To, Ho, Wo, C_in, kt, kh, kw]
            cols = np.tensordot(g, wd, axes=([1], [0]))
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for a, b, c in itertools.product(*map(range, kernel)):
                gxp[
                    :,
                    :,
                    a : a + st * (To - 1) + 1 : st,
                    b : b + sh * (Ho - 1) + 1 : sh,
                    c : c + sw * (Wo - 1) + 1 : sw,
                ] += cols[..., a, b, c].transpose(0, 4, 1, 2, 3)
            gx = gxp[
                :, :, pt : pt + x.shape[2], ph : ph + x.shape[3], pw : pw + x.shape[4]
            ]
        grads = (gx, gw.astype(wd.dtype, copy=False))
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3, 4)),)
        return grads

    return _result(y, parents, back)


def conv3d_naive_oracle(x, weight, bias=None, stride=1, padding=0) -> np.ndarray:
    """Reference convolution: explicit nested loops with float64 sums.

    Accepts tensors or arrays and returns a float64 array.  Slow by
    design; keep inputs small.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    w = np.asarray(weight.data if isinstance(weight, Tensor) else weight, dtype=np.float64)
    b = None
    if bias is not None:
        b = np.asarray(bias.data if isinstance(bias, Tensor) else bias, dtype=np.float64)
    stride, padding = _triple(stride), _triple(padding)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape[1]}, weight {w.shape[1]}")
    N, C, T, H, W = x.shape
    O, _, kt, kh, kw = w.shape
    _, _, To, Ho, Wo = conv3d_output_shape(x.shape, O, (kt, kh, kw), stride, padding)
    st, sh, sw = stride
    pt, ph, pw = padding
    out = np.zeros((N, O, To, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for t in range(To):
                for i in range(Ho):
                    for j in range(Wo):
                        acc = 0.0 if b is None else b[o]
                        for c in range(C):
                            for a in range(kt):
                                ti = t * st - pt + a
                                if not 0 <= ti < T:
                                    continue
                                for bb in range(kh):
                                    hi = i * sh - ph + bb
                                    if not 0 <= hi < H:
                                        continue
                                    for cc in range(kw):
                                        wi = j * sw - pw + cc
                                        if 0 <= wi < W:
                                            acc += x[n, c, ti, hi, wi] * w[o, c, a, bb, cc]
                        out[n, o, t, i, j] = acc
    return out


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over every axis except 1.

    In training mode the running statistics are updated in place
    (unbiased variance, as in the reference family).
    """
    C = x.shape[1]
    if scale.shape != (C,):
        raise ShapeError(f"batch_norm expects {scale.shape[0]} channels, got {C}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        m = math.prod(xd.shape[i] for i in axes)
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(bshape).astype(xd.dtype)) * invstd.reshape(bshape)
    y = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def back(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gxhat = g * scale.data.reshape(bshape)
        if training:
            gx = (invstd.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * invstd.reshape(bshape)
        return gx, gscale, gshift

    return _result(y.astype(xd.dtype, copy=False), (x, scale, shift), back)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(xd.var(axis=-1, keepdims=True) + eps)
    xhat = (xd - mean) * invstd
    n = xd.shape[-1]
    y = xhat * scale.data + shift.data

    def back(g):
        red = tuple(range(g.ndim - 1))
        gxhat = g * scale.data
        gx = (invstd / n) * (
            n * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(y.astype(xd.dtype, copy=False), (x, scale, shift), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects {weight.shape[1]} input features, got {x.shape[-1]}")
    if x.ndim == 1:
        raise ShapeError("linear needs a batch axis")
    y = matmul(x, weight.T)
    return add(y, bias) if bias is not None else y


def dropout(x: Tensor, p: float, training: bool, gen: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not training or p == 0.0:
        return x
    if gen is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = gen.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul(x, Tensor(mask))


def cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{n} logits rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - shifted[rows, labels]).mean()
    p = np.exp(shifted - lse[:, None])

    def back(g):
        gz = p.copy()
        gz[rows, labels] -= 1
        return (gz * (g / n),)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), back)

"""Differentiable layers used by the multi-stream network.

All feature maps are 5-d: ``(batch, channels, d0, d1, d2)`` with the spatial
axes in the same order as the volume grids they came from.
"""

from __future__ import annotations

import numpy as np

from .kernels.conv import (
    conv3d_backward,
    conv3d_forward,
    conv_transpose3d_backward,
    conv_transpose3d_forward,
)
from .kernels.pool import maxpool3d_backward, maxpool3d_forward
from .tensor import ContractError, Tensor, record

__all__ = [
    "conv3d",
    "maxpool3d",
    "upsample_trilinear",
    "transposed_conv3d",
    "batchnorm",
    "dropout",
    "InvalidRateError",
    "BatchNormState",
]


class InvalidRateError(ValueError):
    pass


def conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 3D cross-correlation (3x3x3 or 1x1x1 kernels)."""
    try:
        out = conv3d_forward(x.data, weight.data, bias.data)
    except ValueError as exc:
        raise ContractError(str(exc)) from None

    def grad_fn(g):
        return conv3d_backward(x.data, weight.data, g)

    return record(out, [x, weight, bias], grad_fn)


def maxpool3d(x: Tensor, pool) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    pool = tuple(int(p) for p in pool)
    if pool == (1, 1, 1):
        return x
    try:
        out, arg = maxpool3d_forward(x.data, pool)
    except ValueError as exc:
        raise ContractError(str(exc)) from None
    return record(out, [x], lambda g: (maxpool3d_backward(g, arg, pool),))


def interpolation_matrix(n_in: int, factor: int) -> np.ndarray:
    """Linear interpolation weights for ``factor``-fold upsampling of ``n_in`` samples.

    Half-pixel (align-corners-false) convention: output sample ``i`` sits at
    input coordinate ``(i + 0.5) / factor - 0.5``, clamped to the edge samples.
    """
    n_out = n_in * factor
    u = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1)
    i0 = np.floor(u).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = u - i0
    a = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - t)
    np.add.at(a, (rows, i1), t)
    return a


def _apply_along(x, mats, transpose=False):
    for axis, m in mats:
        m = (m.T if transpose else m).astype(x.dtype, copy=False)
        x = np.moveaxis(np.tensordot(x, m, axes=([axis], [1])), -1, axis)
    return np.ascontiguousarray(x)


def upsample_trilinear(x: Tensor, factor) -> Tensor:
    """Separable trilinear upsampling by an integer factor per spatial axis."""
    factor = tuple(int(f) for f in factor)
    if len(factor) != 3 or any(f < 1 for f in factor):
        raise ContractError(f"upsampling factors must be three integers >= 1, got {factor}")
    if factor == (1, 1, 1):
        return x
    mats = [(2 + a, interpolation_matrix(x.shape[2 + a], f)) for a, f in enumerate(factor) if f > 1]
    out = _apply_along(x.data, mats)
    return record(out, [x], lambda g: (_apply_along(g, mats, transpose=True),))


def transposed_conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Transposed convolution with kernel size equal to the stride.

    ``weight`` has shape ``(cin, cout, s0, s1, s2)``; the stride is read from it.
    """
    try:
        out = conv_transpose3d_forward(x.data, weight.data, bias.data)
    except ValueError as exc:
        raise ContractError(str(exc)) from None
    return record(out, [x, weight, bias], lambda g: conv_transpose3d_backward(x.data, weight.data, g))


class BatchNormState:
    """Running statistics of one batch-norm layer (not learnable)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization over the batch and all spatial positions.

    With batch size one the statistics come from the spatial extent alone.
    Train mode also folds the current statistics into ``state``.
    """
    axes = (0, 2, 3, 4)
    c = x.shape[1]
    bshape = (1, c, 1, 1, 1)
    xd = x.data.astype(np.float64)
    if mode == "train":
        m = xd.size // c
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * m / max(m - 1, 1)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    elif mode == "infer":
        mean, var = state.running_mean, state.running_var
    else:
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
    g_ = gamma.data.astype(np.float64).reshape(bshape)
    out = (g_ * xhat + beta.data.astype(np.float64).reshape(bshape)).astype(x.dtype)

    def grad_fn(g):
        gd = g.astype(np.float64)
        dgamma = (gd * xhat).sum(axis=axes)
        dbeta = gd.sum(axis=axes)
        dxhat = gd * g_
        if mode == "infer":
            dx = dxhat * inv.reshape(bshape)
        else:
            m = xd.size // c
            dx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        return dx.astype(x.dtype), dgamma.astype(gamma.dtype), dbeta.astype(beta.dtype)

    return record(out, [x, gamma, beta], grad_fn)


def dropout(x: Tensor, rate: float, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``; identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRateError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x
    if mode != "train":
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * scale
    return record(x.data * keep, [x], lambda g: (g * keep,))

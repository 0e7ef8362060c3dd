"""Spatial softmax, Soft-argmax and the joint-presence head.

Heat maps are stored row-major as ``(..., H, W)``: column index ``i``
(1-based) runs along x and row index ``j`` along y.  The coordinate ramps
are ``i / W`` and ``j / H``, so regressed locations lie in ``(0, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import Tensor, _check_finite, _make, as_tensor, conv2d, exp, reduce_max, reduce_sum, sigmoid, sub, div


@dataclass(frozen=True)
class RampWeights:
    """Normalized coordinate ramps for a ``height x width`` map.

    ``wx[j, i] = (i + 1) / width`` and ``wy[j, i] = (j + 1) / height``
    (0-based array indices).
    """

    width: int
    height: int
    wx: np.ndarray
    wy: np.ndarray

    def stacked(self, dtype=np.float64):
        """(2, H*W) matrix, x row first."""
        return _stacked(self.width, self.height, np.dtype(dtype).str)


def ramp_weights(width, height=None):
    height = width if height is None else height
    if width < 1 or height < 1:
        raise ValueError("ramp size must be positive")
    wx, wy = _ramps(width, height)
    return RampWeights(width, height, wx, wy)


@lru_cache(maxsize=None)
def _ramps(width, height):
    wx = np.broadcast_to(np.arange(1, width + 1) / width, (height, width)).copy()
    wy = np.broadcast_to((np.arange(1, height + 1) / height)[:, None], (height, width)).copy()
    wx.flags.writeable = False
    wy.flags.writeable = False
    return wx, wy


@lru_cache(maxsize=None)
def _stacked(width, height, dtype):
    wx, wy = _ramps(width, height)
    out = np.stack([wx.reshape(-1), wy.reshape(-1)]).astype(dtype)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=None)
def _index_stacked(width, height, dtype):
    """(2, H*W) matrix of 1-based column and row indices."""
    ix = np.broadcast_to(np.arange(1, width + 1), (height, width)).reshape(-1)
    iy = np.broadcast_to(np.arange(1, height + 1)[:, None], (height, width)).reshape(-1)
    out = np.stack([ix, iy]).astype(dtype)
    out.flags.writeable = False
    return out


def _shifted_exp(h):
    """exp(h - max) and its spatial sum."""
    m = h.max(axis=(-2, -1), keepdims=True)
    e = np.exp(h - m)
    return e, e.sum(axis=(-2, -1), keepdims=True)


def _softmax_np(h):
    """Softmax over the last two axes with max subtraction."""
    e, s = _shifted_exp(h)
    return e / s


def spatial_softmax(h):
    """Normalise each map over its spatial extent (last two axes)."""
    h = as_tensor(h)
    _check_finite(h.data, "spatial_softmax")
    out = _softmax_np(h.data)

    def backward(g):
        return (out * (g - (g * out).sum(axis=(-2, -1), keepdims=True)),)

    return _make(out, (h,), backward, "spatial_softmax")


def spatial_softmax_composed(h):
    """Same as :func:`spatial_softmax` but built from primitive autodiff ops."""
    h = as_tensor(h)
    m = Tensor(h.data.max(axis=(-2, -1), keepdims=True))
    e = exp(sub(h, m))
    return div(e, reduce_sum(e, axis=(-2, -1), keepdims=True))


def _weighted_sum(e, total, index):
    """Expected coordinates from unnormalised weights ``e`` (..., H, W).

    Integer indices go through the GEMM and the single division by
    ``W * sum(e)`` comes last, so a uniform map lands exactly on the
    rounded centre.
    """
    H, W = e.shape[-2:]
    lead = e.shape[:-2]
    flat = e.reshape(-1, H * W)
    # same GEMM operands as the convolution path, hence bit-identical
    num = (flat @ np.ascontiguousarray(index.T)).reshape(lead + (2,))
    den = total.reshape(lead + (1,)) * np.array([W, H], dtype=e.dtype)
    out = num / den
    # rounding may overshoot 1 by an ulp; keep the (0, 1] range contract
    return np.minimum(out, 1.0, out=out)


def soft_argmax_grad(prob, upstream, ramps):
    """Gradient of ``sum(upstream * Psi(h))`` w.r.t. ``h`` from the softmax output.

    Uses the full softmax Jacobian: d = Phi * (w - sum(Phi * w)) where
    ``w = gx * Wx + gy * Wy``.
    """
    w = (upstream.reshape(-1, 2) @ ramps).reshape(prob.shape)
    return prob * (w - (prob * w).sum(axis=(-2, -1), keepdims=True))


def soft_argmax(h):
    """Expected ``(x, y)`` under the spatial softmax of ``h``.

    Accepts any leading batch/channel dims; returns shape ``(..., 2)``.
    """
    h = as_tensor(h)
    _check_finite(h.data, "soft_argmax")
    H, W = h.shape[-2:]
    ramps = _stacked(W, H, h.dtype.str)
    e, total = _shifted_exp(h.data)
    out = _weighted_sum(e, total, _index_stacked(W, H, h.dtype.str))
    prob = e / total

    def backward(g):
        return (soft_argmax_grad(prob, g, ramps),)

    return _make(out, (h,), backward, "soft_argmax")


def soft_argmax_backward(h, upstream):
    """Gradient of ``gx * Psi_x(h) + gy * Psi_y(h)`` w.r.t. a single map ``h``."""
    h = np.asarray(h.data if isinstance(h, Tensor) else h)
    upstream = np.asarray(upstream, dtype=h.dtype)
    if upstream.shape[-1] != 2 or upstream.shape[:-1] != h.shape[:-2]:
        raise ValueError(f"upstream shape {upstream.shape} does not match maps {h.shape}")
    H, W = h.shape[-2:]
    return soft_argmax_grad(_softmax_np(h), upstream, _stacked(W, H, h.dtype.str))


def soft_argmax_printed_derivative(h):
    """Per-cell diagonal term ``W * Phi * (1 - Phi)`` for x and y.

    Only the diagonal of the softmax Jacobian; kept to compare against the
    exact gradient, not used for training.
    """
    h = np.asarray(h)
    H, W = h.shape[-2:]
    wx, wy = _ramps(W, H)
    p = _softmax_np(h)
    return wx * p * (1 - p), wy * p * (1 - p)


def soft_argmax_conv(h):
    """Soft-argmax realised with a fixed convolution.

    The two output filters span the whole map and hold the column and row
    indices, so the valid correlation of the shifted exponentials collapses
    each map to one value per filter; dividing by ``W * sum`` (or ``H * sum``)
    normalises, which by linearity equals convolving the softmax with the
    normalised ramps.
    ``h`` has shape ``(B, C, H, W)``; returns ``(B, C, 2)``.
    """
    h = as_tensor(h)
    B, C, H, W = h.shape
    m = Tensor(h.data.max(axis=(-2, -1), keepdims=True))
    e = exp(sub(h, m))
    total = reduce_sum(e, axis=(-2, -1), keepdims=True)
    kernel = Tensor(_index_stacked(W, H, h.dtype.str).reshape(2, 1, H, W))
    num = conv2d(e.reshape(B * C, 1, H, W), kernel, padding="valid")  # (B*C, 2, 1, 1)
    scale = Tensor(np.array([W, H], dtype=h.dtype).reshape(1, 2, 1, 1))
    out = div(num, total.reshape(B * C, 1, 1, 1) * scale)
    clamped = _make(np.minimum(out.data, 1.0), (out,), lambda g: (g,), "clamp_unit")
    return clamped.reshape(B, C, 2)


def joint_probability(h):
    """Sigmoid of the global max of each pre-softmax map; shape ``(...)``."""
    h = as_tensor(h)
    _check_finite(h.data, "joint_probability")
    return sigmoid(reduce_max(h, axis=(-2, -1)))

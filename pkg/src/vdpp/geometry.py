"""Median scaler, bilinear resampling, Sobel gradients and the 3-channel manifold.

All frame functions accept either numpy arrays or :class:`~vdpp.tensor.Tensor`
with any number of leading batch dims (the last two axes are H, W) and return
the same kind they were given.  Tensor inputs stay differentiable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor

__all__ = [
    "ScalerParams",
    "median",
    "scale_factor",
    "diff_scale",
    "resampled_size",
    "resample_weights",
    "resample_axis",
    "bilinear_resample",
    "resize_to",
    "sobel",
    "build_manifold",
]


@dataclass
class ScalerParams:
    a: Tensor
    b: Tensor

    @classmethod
    def create(cls, a: float = 0.0, b: float = 0.0, requires_grad: bool = True) -> "ScalerParams":
        return cls(Tensor(a, requires_grad=requires_grad), Tensor(b, requires_grad=requires_grad))

    def values(self) -> tuple[float, float]:
        return self.a.item(), self.b.item()

    def parameters(self) -> dict[str, Tensor]:
        return {"scaler.a": self.a, "scaler.b": self.b}


def median(frame) -> float:
    """Median pixel value; even counts average the two middle order statistics."""
    arr = frame.data if isinstance(frame, Tensor) else np.asarray(frame, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("median of an empty frame")
    return float(np.median(arr))


def scale_factor(m, params: ScalerParams) -> Tensor:
    """exp(tanh(-a*m + b)); ``m`` is a float or an array of per-frame medians."""
    m = np.asarray(m, dtype=np.float64)
    a, b = params.a, params.b
    if m.ndim:
        a = tn.broadcast_to(a, m.shape)
        b = tn.broadcast_to(b, m.shape)
    return tn.exp(tn.tanh(tn.add(tn.neg(tn.mul(a, Tensor(m))), b)))


def diff_scale(frames, params: ScalerParams) -> Tensor:
    """Scale each H x W frame by its own median-driven factor.

    Medians are taken on the input values and carry no gradient; gradients
    flow into ``params.a`` and ``params.b`` only (and into ``frames`` through
    the product, should it be tracked).
    """
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    if x.ndim < 2:
        raise ValueError("diff_scale expects (..., H, W)")
    lead = x.shape[:-2]
    if not lead:
        return tn.mul(x, scale_factor(median(x), params))
    meds = np.median(x.data.reshape(lead + (-1,)), axis=-1)
    s = scale_factor(meds, params)
    s = tn.broadcast_to(tn.reshape(s, lead + (1, 1)), x.shape)
    return tn.mul(x, s)


# ---------------------------------------------------------------- resampling


def resampled_size(n: int, ratio: float) -> int:
    # tolerate float noise such as 0.3 * 10 = 3.0000000000000004
    return max(1, int(math.ceil(ratio * n - 1e-9)))


def resample_weights(n_in: int, n_out: int, ratio: float):
    """Source indices and lerp weights for half-pixel-centre sampling.

    Output ``i`` reads source coordinate ``(i + 0.5) / ratio - 0.5`` clamped
    to ``[0, n_in - 1]``.
    """
    i = np.arange(n_out, dtype=np.float64)
    src = np.clip((i + 0.5) / ratio - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resample_axis(x: Tensor, axis: int, n_out: int, ratio: float) -> Tensor:
    lo, hi, w = resample_weights(x.shape[axis], n_out, ratio)
    return tn.lerp_gather(x, axis, lo, hi, w)


def _as_t(x):
    return (x, True) if isinstance(x, Tensor) else (Tensor(np.asarray(x, dtype=np.float64)), False)


def bilinear_resample(frame, ratio: float):
    """Resample the last two axes to ceil(ratio*H) x ceil(ratio*W)."""
    if not ratio > 0:
        raise ValueError(f"bilinear_resample: ratio must be positive, got {ratio}")
    if ratio > 4:
        raise ValueError(f"bilinear_resample: ratio must be <= 4, got {ratio}")
    x, is_t = _as_t(frame)
    h, w = x.shape[-2:]
    out = resample_axis(x, -2, resampled_size(h, ratio), ratio)
    out = resample_axis(out, -1, resampled_size(w, ratio), ratio)
    return out if is_t else out.data


def resize_to(frame, height: int, width: int, ratio: float):
    """Resample to an exact size using sampling ratio ``ratio`` (used to undo a downsample)."""
    x, is_t = _as_t(frame)
    out = resample_axis(x, -2, height, ratio)
    out = resample_axis(out, -1, width, ratio)
    return out if is_t else out.data


# ---------------------------------------------------------------- sobel


def sobel(frame):
    """Sobel gradients normalised by 1/8 with replicate padding.

    Returns ``(gx, gy)``: ``gx`` differentiates along width, ``gy`` along
    height.  A unit-slope ramp gives gradient 1 away from the borders.
    """
    x, is_t = _as_t(frame)
    h, w = x.shape[-2:]
    if h < 3 or w < 3:
        raise ValueError(f"sobel: frame must be at least 3x3, got {h}x{w}")
    rows = np.concatenate([[0], np.arange(h), [h - 1]])
    cols = np.concatenate([[0], np.arange(w), [w - 1]])
    p = tn.take(tn.take(x, rows, -2), cols, -1)  # (..., h+2, w+2)
    dx = p[..., 2:] - p[..., :-2]  # (..., h+2, w)
    gx = (dx[..., :-2, :] + 2.0 * dx[..., 1:-1, :] + dx[..., 2:, :]) * 0.125
    dy = p[..., 2:, :] - p[..., :-2, :]  # (..., h, w+2)
    gy = (dy[..., :-2] + 2.0 * dy[..., 1:-1] + dy[..., 2:]) * 0.125
    if is_t:
        return gx, gy
    return gx.data, gy.data


def build_manifold(scaled, ratio: float = 0.5):
    """Stack (depth, d/dx, d/dy) of the downsampled map as channel axis -3."""
    x, is_t = _as_t(scaled)
    down = bilinear_resample(x, ratio)
    gx, gy = sobel(down)
    out = tn.stack([down, gx, gy], axis=-3)
    return out if is_t else out.data

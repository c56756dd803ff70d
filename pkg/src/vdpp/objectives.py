"""Affine-invariant spatial loss, temporal gradient matching, and their weighted sum.

Losses take a prediction (numpy array or Tensor) and a ground truth array
with frames on the last two axes and time on axis -3.  Any extra leading
axis (a batch) is averaged over like another set of frames.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor

__all__ = [
    "LossWeights",
    "align_scale_shift",
    "frame_alignment",
    "spatial_loss",
    "temporal_gradient",
    "tgm_loss",
    "total_loss",
    "loss_terms",
]

VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 10.0
    tgm_strides: tuple[int, ...] = (1,)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")
        if not self.tgm_strides or min(self.tgm_strides) < 1:
            raise ValueError("tgm_strides must be a non-empty set of positive offsets")
        object.__setattr__(self, "tgm_strides", tuple(sorted(set(int(s) for s in self.tgm_strides))))


def align_scale_shift(pred, gt) -> tuple[float, float]:
    """Least-squares (s, t) minimising sum((s*pred + t - gt)**2) over all values."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    if p.shape != g.shape:
        raise ValueError(f"align_scale_shift: shape mismatch {np.shape(pred)} vs {np.shape(gt)}")
    if p.size < 2:
        raise ValueError("align_scale_shift needs at least 2 values")
    pm, gm = p.mean(), g.mean()
    pc = p - pm
    var = np.dot(pc, pc) / p.size
    if var < VAR_FLOOR:
        return 1.0, float(gm - pm)
    s = np.dot(pc, g - gm) / np.dot(pc, pc)
    return float(s), float(gm - s * pm)


def frame_alignment(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame (s, t) arrays over the leading axes of (..., H, W) inputs."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    lead = p.shape[:-2]
    pf = p.reshape((-1,) + p.shape[-2:])
    gf = g.reshape((-1,) + g.shape[-2:])
    st = np.array([align_scale_shift(a, b) for a, b in zip(pf, gf)]).reshape(lead + (2,))
    return st[..., 0], st[..., 1]


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_same(pred, gt, what: str) -> None:
    if _data(pred).shape != np.shape(gt):
        raise ValueError(f"{what}: shape mismatch {_data(pred).shape} vs {np.shape(gt)}")


def spatial_loss(pred, gt, alignment: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Mean absolute error after per-frame scale/shift alignment of ``pred``.

    The alignment is solved on the current values and then held constant, so
    no gradient flows through (s, t).  Pass ``alignment`` to reuse a fixed
    pair, e.g. when finite-differencing.
    """
    _check_same(pred, gt, "spatial_loss")
    x = pred if isinstance(pred, Tensor) else Tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError("spatial_loss expects (..., H, W)")
    s, t = alignment if alignment is not None else frame_alignment(x.data, gt)
    s = np.broadcast_to(np.asarray(s, dtype=np.float64)[..., None, None], x.shape)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64)[..., None, None], x.shape)
    aligned = tn.add(tn.mul(x, Tensor(s)), Tensor(t))
    return tn.mean(tn.abs_(tn.sub(aligned, Tensor(gt))))


def temporal_gradient(seq, stride: int = 1):
    """``seq[t + stride] - seq[t]`` along axis -3."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = _data(seq).shape[-3]
    if stride >= n:
        raise ValueError(f"stride {stride} needs more than {n} frames")
    if isinstance(seq, Tensor):
        return tn.sub(seq[..., stride:, :, :], seq[..., :-stride, :, :])
    arr = np.asarray(seq, dtype=np.float64)
    return arr[..., stride:, :, :] - arr[..., :-stride, :, :]


def tgm_loss(pred, gt, strides=(1,)) -> Tensor:
    """Mean |grad_t pred - grad_t gt| per stride, averaged over strides."""
    _check_same(pred, gt, "tgm_loss")
    strides = tuple(strides)
    if not strides:
        raise ValueError("tgm_loss: empty stride set")
    x = pred if isinstance(pred, Tensor) else Tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if x.ndim < 3 or x.shape[-3] < max(strides) + 1:
        raise ValueError(f"tgm_loss: need more than {max(strides)} frames")
    terms = [
        tn.mean(tn.abs_(tn.sub(temporal_gradient(x, s), Tensor(temporal_gradient(gt, s)))))
        for s in strides
    ]
    out = terms[0]
    for term in terms[1:]:
        out = tn.add(out, term)
    return out if len(terms) == 1 else tn.mul(out, 1.0 / len(terms))


def loss_terms(pred, gt, weights: LossWeights = LossWeights()) -> tuple[Tensor, Tensor, Tensor]:
    """(total, spatial, temporal) for one prediction."""
    sp = spatial_loss(pred, gt)
    tm = tgm_loss(pred, gt, weights.tgm_strides)
    total = tn.add(tn.mul(sp, weights.alpha), tn.mul(tm, weights.beta))
    return total, sp, tm


def total_loss(pred, gt, weights: LossWeights = LossWeights()) -> Tensor:
    return loss_terms(pred, gt, weights)[0]

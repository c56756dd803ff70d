"""Evaluation metrics (AbsRel, delta1, TGSE), evaluation alignment and D2V timing."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .depth_io import DepthSequence
from .objectives import align_scale_shift, temporal_gradient

__all__ = [
    "MetricsReport",
    "BenchResult",
    "ALIGN_MODES",
    "eval_align",
    "abs_rel",
    "delta1",
    "tgse",
    "evaluate",
    "bench_d2v",
    "REPORT_COLUMNS",
    "write_report_csv",
]

ALIGN_MODES = ("none", "per_sequence_scale_shift")
VALID_MIN = 1e-6
REPORT_COLUMNS = ("sequence_id", "abs_rel", "delta1", "tgse", "tgse_x100", "frames", "d2v_ms", "fps")


def _arr(x) -> np.ndarray:
    return x.frames if isinstance(x, DepthSequence) else np.asarray(x, dtype=np.float64)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


@dataclass
class MetricsReport:
    abs_rel: float
    delta1: float
    tgse: float
    frames: int
    d2v_ms_per_frame: float = float("nan")
    fps: float = float("nan")

    @property
    def tgse_x100(self) -> float:
        return 100.0 * self.tgse

    def row(self, sequence_id: str) -> dict:
        return {
            "sequence_id": sequence_id,
            "abs_rel": self.abs_rel,
            "delta1": self.delta1,
            "tgse": self.tgse,
            "tgse_x100": self.tgse_x100,
            "frames": self.frames,
            "d2v_ms": self.d2v_ms_per_frame,
            "fps": self.fps,
        }


def eval_align(pred, gt, mode: str = "per_sequence_scale_shift") -> np.ndarray:
    """Apply one (s, t) fitted jointly over every frame, or nothing."""
    p, g = _pair(pred, gt)
    if mode == "none":
        return p.copy()
    if mode != "per_sequence_scale_shift":
        raise ValueError(f"unknown alignment mode {mode!r}; choose from {ALIGN_MODES}")
    s, t = align_scale_shift(p, g)
    return s * p + t


def _valid(g: np.ndarray, valid_min: float) -> np.ndarray:
    mask = g > valid_min
    if not mask.any():
        raise ValueError(f"no valid ground-truth pixels (gt > {valid_min})")
    return mask


def abs_rel(pred, gt, valid_min: float = VALID_MIN) -> float:
    p, g = _pair(pred, gt)
    m = _valid(g, valid_min)
    return float(np.mean(np.abs(p[m] - g[m]) / g[m]))


def delta1(pred, gt, threshold: float = 1.25, valid_min: float = VALID_MIN) -> float:
    p, g = _pair(pred, gt)
    m = _valid(g, valid_min)
    pv, gv = p[m], g[m]
    if np.any(pv <= 0):
        raise ValueError("delta1: non-positive prediction on a valid pixel")
    ratio = np.maximum(pv / gv, gv / pv)
    return float(np.mean(ratio < threshold))


def tgse(pred, gt) -> float:
    """Mean squared difference of frame-to-frame changes over all pixel pairs."""
    p, g = _pair(pred, gt)
    if p.ndim < 3 or p.shape[-3] < 2:
        raise ValueError("tgse needs at least 2 frames")
    d = temporal_gradient(p, 1) - temporal_gradient(g, 1)
    return float(np.mean(d * d))


def evaluate(pred, gt, align_mode: str = "per_sequence_scale_shift", valid_min: float = VALID_MIN) -> MetricsReport:
    p, g = _pair(pred, gt)
    aligned = eval_align(p, g, align_mode)
    return MetricsReport(
        abs_rel=abs_rel(aligned, g, valid_min),
        delta1=delta1(aligned, g, valid_min=valid_min),
        tgse=tgse(aligned, g),
        frames=p.shape[-3],
    )


def write_report_csv(rows: list[dict], path) -> None:
    with open(Path(path), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


@dataclass
class BenchResult:
    ms_per_frame: float
    fps: float
    frames: int
    height: int
    width: int
    window: int
    warmup: int
    reps: int
    samples_ms: list[float]

    def as_dict(self) -> dict:
        return asdict(self)


def bench_d2v(model, scaler, seq, warmup: int = 2, reps: int = 5) -> BenchResult:
    """Median wall-clock refinement time per frame over ``reps`` timed runs."""
    from .refiner import refine_sequence

    if reps < 1:
        raise ValueError("reps must be >= 1")
    frames = _arr(seq)
    T, H, W = frames.shape
    for _ in range(warmup):
        refine_sequence(frames, scaler, model)
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        refine_sequence(frames, scaler, model)
        samples.append((time.perf_counter() - t0) * 1000.0)
    ms = float(np.median(samples)) / T
    return BenchResult(ms, 1000.0 / ms, T, H, W, model.config.window, warmup, reps, samples)

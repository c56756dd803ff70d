"""Synthetic depth videos and flicker/noise degradations.

Per-frame scale draws come from a splitmix64 stream keyed by ``(seed, t)`` so
that a given frame's factor never depends on how many frames or which lambda
were requested.  Scene layout and pixel noise use numpy's PCG64 generator.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .depth_io import DepthSequence
from .metrics import abs_rel, tgse

__all__ = [
    "SceneSpec",
    "PerturbSpec",
    "DEFAULT_GRID",
    "splitmix64",
    "uniform01",
    "scale_draws",
    "gen_scene",
    "perturb_scale",
    "perturb_noise",
    "sweep",
    "SWEEP_COLUMNS",
    "write_sweep_csv",
]

_MASK64 = (1 << 64) - 1
DEPTH_FLOOR = 1e-6
DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(11))
SWEEP_COLUMNS = ("lambda", "tgse_mean", "tgse_std", "absrel_mean", "absrel_std", "seeds")


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def uniform01(seed: int, t: int) -> float:
    """Deterministic U[0, 1) draw for frame ``t`` of stream ``seed`` (53-bit)."""
    z = splitmix64(splitmix64(seed & _MASK64) ^ (t & _MASK64))
    return (z >> 11) * (1.0 / (1 << 53))


def scale_draws(T: int, lam: float, seed: int) -> np.ndarray:
    """Per-frame factors s_t ~ U(1 - lam, 1 + lam)."""
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda must lie in [0, 1), got {lam}")
    u = np.array([uniform01(seed, t) for t in range(T)])
    return 1.0 + lam * (2.0 * u - 1.0)


@dataclass
class SceneSpec:
    seed: int = 0
    H: int = 64
    W: int = 64
    T: int = 16
    n_objects: int = 3
    depth_range: tuple[float, float] = (1.0, 4.0)
    velocity_range: tuple[float, float] = (0.0, 1.5)
    background: str = "ramp"
    background_depth: float | None = None

    def __post_init__(self):
        self.depth_range = tuple(float(v) for v in self.depth_range)
        self.velocity_range = tuple(float(v) for v in self.velocity_range)
        near, far = self.depth_range
        if not 0 < near < far:
            raise ValueError(f"depth_range must satisfy 0 < near < far, got {self.depth_range}")
        if self.n_objects < 0:
            raise ValueError("n_objects must be >= 0")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.H < 3 or self.W < 3:
            raise ValueError("H and W must be >= 3")
        lo, hi = self.velocity_range
        if lo < 0 or hi < lo:
            raise ValueError(f"velocity_range must satisfy 0 <= lo <= hi, got {self.velocity_range}")
        if self.background not in ("constant", "ramp"):
            raise ValueError(f"background must be 'constant' or 'ramp', got {self.background!r}")
        if self.background_depth is not None and self.background_depth <= 0:
            raise ValueError("background_depth must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class PerturbSpec:
    lam: float = 0.0
    seed: int = 0
    grid: tuple[float, ...] = field(default=DEFAULT_GRID)

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ValueError(f"lambda must lie in [0, 1), got {self.lam}")


def _background(spec: SceneSpec) -> np.ndarray:
    near, far = spec.depth_range
    if spec.background == "constant":
        d = far if spec.background_depth is None else spec.background_depth
        return np.full((spec.H, spec.W), float(d))
    ramp = np.linspace(near, far, spec.W)
    return np.broadcast_to(ramp, (spec.H, spec.W)).copy()


def gen_scene(spec: SceneSpec) -> DepthSequence:
    """Background plane plus moving rectangles and disks at fixed depths.

    Objects travel at constant (sub-pixel) velocity; positions are clamped so
    every object stays inside the frame.  Nearer objects occlude farther ones.
    """
    rng = np.random.default_rng(spec.seed)
    near, far = spec.depth_range
    H, W = spec.H, spec.W
    objects = []
    for _ in range(spec.n_objects):
        kind = "disk" if rng.random() < 0.5 else "rect"
        size_h = max(2.0, rng.uniform(0.1, 0.3) * H)
        size_w = max(2.0, rng.uniform(0.1, 0.3) * W)
        if kind == "disk":
            size_h = size_w = min(size_h, size_w)
        depth = rng.uniform(near, near + 0.75 * (far - near))
        y0 = rng.uniform(0, H - size_h)
        x0 = rng.uniform(0, W - size_w)
        speed = rng.uniform(*spec.velocity_range, size=2) * rng.choice([-1.0, 1.0], size=2)
        objects.append((depth, kind, size_h, size_w, y0, x0, speed))
    objects.sort(key=lambda o: -o[0])  # far first, near painted last

    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    bg = _background(spec)
    frames = np.empty((spec.T, H, W))
    for t in range(spec.T):
        f = bg.copy()
        for depth, kind, sh, sw, y0, x0, (vy, vx) in objects:
            top = min(max(y0 + vy * t, 0.0), H - sh)
            left = min(max(x0 + vx * t, 0.0), W - sw)
            if kind == "rect":
                mask = (yy >= top) & (yy < top + sh) & (xx >= left) & (xx < left + sw)
            else:
                r = sh / 2.0
                mask = (yy - top - r) ** 2 + (xx - left - r) ** 2 <= r * r
            f[mask] = depth
        frames[t] = f
    return DepthSequence(frames)


def _frames(seq) -> np.ndarray:
    return seq.frames if isinstance(seq, DepthSequence) else np.asarray(seq, dtype=np.float64)


def perturb_scale(seq, spec: PerturbSpec) -> DepthSequence:
    """Multiply frame t by s_t ~ U(1 - lam, 1 + lam)."""
    frames = _frames(seq)
    s = scale_draws(frames.shape[0], spec.lam, spec.seed)
    if spec.lam == 0.0:
        return DepthSequence(frames.copy())
    return DepthSequence(frames * s[:, None, None])


def perturb_noise(seq, sigma: float, seed: int) -> DepthSequence:
    """Add i.i.d. N(0, sigma^2) per pixel, flooring depth at a small positive value."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    frames = _frames(seq)
    if sigma == 0:
        return DepthSequence(frames.copy())
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=frames.shape)
    return DepthSequence(np.maximum(frames + noise, DEPTH_FLOOR))


def sweep(gt, grid=DEFAULT_GRID, seeds_per_point: int = 20, base_seed: int = 0) -> list[dict]:
    """Seed-averaged TGSE and unaligned AbsRel of scale-perturbed ``gt`` per lambda.

    Seeds ``base_seed .. base_seed + seeds_per_point - 1`` are reused at every
    lambda, so each curve is evaluated on common random numbers.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("sweep: empty lambda grid")
    if seeds_per_point < 1:
        raise ValueError("seeds_per_point must be >= 1")
    g = _frames(gt)
    rows = []
    for lam in grid:
        tg, ar = [], []
        for i in range(seeds_per_point):
            pert = perturb_scale(g, PerturbSpec(lam=float(lam), seed=base_seed + i)).frames
            tg.append(tgse(pert, g))
            ar.append(abs_rel(pert, g))
        rows.append(
            {
                "lambda": float(lam),
                "tgse_mean": float(np.mean(tg)),
                "tgse_std": float(np.std(tg)),
                "absrel_mean": float(np.mean(ar)),
                "absrel_std": float(np.std(ar)),
                "seeds": seeds_per_point,
            }
        )
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(Path(path), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def write_manifest(path, **entries) -> None:
    with open(Path(path), "w") as f:
        json.dump(entries, f, indent=2, sort_keys=True)

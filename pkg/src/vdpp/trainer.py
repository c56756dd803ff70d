"""AdamW + cosine warm restarts training of the refiner and the scaler."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .depth_io import DepthSequence
from .geometry import ScalerParams
from .objectives import LossWeights, loss_terms
from .refiner import (
    ModelFormatError,
    RefinerModel,
    _check_magic,
    read_blocks,
    refine,
    save_model,
    write_blocks,
)

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "TrainingDiverged",
    "lr_at",
    "adamw_step",
    "validate_corpus",
    "sample_batch",
    "train",
    "TrainResult",
    "LOG_COLUMNS",
    "save_optimizer",
    "load_optimizer",
]

OPT_MAGIC = b"VDPPO1"
LOG_COLUMNS = ("step", "lr", "loss_spatial", "loss_temporal", "loss_total")


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    T0: int = 200
    Tmult: int = 2
    eta_min: float = 1e-6
    batch: int = 4
    crop: int = 64
    clip_len: int = 16
    steps: int = 500
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if not 0 < self.eta_min <= self.base_lr:
            raise ValueError("need 0 < eta_min <= base_lr")
        if self.T0 < 1 or self.Tmult < 1:
            raise ValueError("need T0 >= 1 and Tmult >= 1")
        if self.clip_len < 2:
            raise ValueError("clip_len must be >= 2")
        if self.batch < 1 or self.crop < 3 or self.steps < 0:
            raise ValueError("batch >= 1, crop >= 3 and steps >= 0 required")

    @classmethod
    def published(cls, **overrides) -> "TrainConfig":
        """Hyperparameters of the original long-schedule setup."""
        vals = dict(base_lr=1e-6, T0=10000, Tmult=2, eta_min=1e-9, batch=16, crop=224, clip_len=16)
        vals.update(overrides)
        return cls(**vals)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"]["tgm_strides"] = list(d["loss_weights"]["tgm_strides"])
        d["betas"] = list(d["betas"])
        return d


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Cosine annealing with warm restarts; cycle i lasts T0 * Tmult**i steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.Tmult == 1:
        t_cur, t_i = step % cfg.T0, cfg.T0
    else:
        t_cur, t_i = step, cfg.T0
        while t_cur >= t_i:
            t_cur -= t_i
            t_i *= cfg.Tmult
    return cfg.eta_min + (cfg.base_lr - cfg.eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i)) / 2.0


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """One AdamW update in place on ``params`` (name -> Tensor)."""
    b1, b2 = cfg.betas
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.data = p.data * (1.0 - lr * cfg.weight_decay) - lr * update


def _frames(x) -> np.ndarray:
    return x.frames if isinstance(x, DepthSequence) else np.asarray(x, dtype=np.float64)


def validate_corpus(corpus, cfg: TrainConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    if not corpus:
        raise ValueError("empty training corpus")
    out = []
    for i, (deg, gt) in enumerate(corpus):
        d, g = _frames(deg), _frames(gt)
        if d.shape != g.shape:
            raise ValueError(f"corpus item {i}: degraded {d.shape} and gt {g.shape} differ")
        T, H, W = d.shape
        if T < cfg.clip_len:
            raise ValueError(f"corpus item {i}: {T} frames < clip_len {cfg.clip_len}")
        if H < cfg.crop or W < cfg.crop:
            raise ValueError(f"corpus item {i}: {H}x{W} smaller than crop {cfg.crop}")
        out.append((d, g))
    return out


def sample_batch(corpus, cfg: TrainConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
    """(degraded, gt) clips of shape (batch, clip_len, crop, crop) for ``step``.

    Sequence, clip start and crop offset are drawn from a generator seeded by
    ``(seed, step)``; the same window is cut from both members of a pair.
    """
    rng = np.random.default_rng([cfg.seed, step])
    deg_out = np.empty((cfg.batch, cfg.clip_len, cfg.crop, cfg.crop))
    gt_out = np.empty_like(deg_out)
    for b in range(cfg.batch):
        deg, gt = corpus[int(rng.integers(len(corpus)))]
        T, H, W = deg.shape
        t0 = int(rng.integers(T - cfg.clip_len + 1))
        y0 = int(rng.integers(H - cfg.crop + 1))
        x0 = int(rng.integers(W - cfg.crop + 1))
        sl = (slice(t0, t0 + cfg.clip_len), slice(y0, y0 + cfg.crop), slice(x0, x0 + cfg.crop))
        deg_out[b] = deg[sl]
        gt_out[b] = gt[sl]
    return deg_out, gt_out


def _all_params(model: RefinerModel, scaler: ScalerParams) -> dict:
    params = dict(model.params)
    params.update(scaler.parameters())
    return params


@dataclass
class TrainResult:
    model: RefinerModel
    scaler: ScalerParams
    log: list[dict]
    opt_state: OptimizerState


def train(
    model: RefinerModel,
    scaler: ScalerParams,
    corpus,
    cfg: TrainConfig,
    *,
    log_path=None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
    opt_state: OptimizerState | None = None,
    progress=None,
) -> TrainResult:
    """Run ``cfg.steps`` optimisation steps, continuing from ``opt_state.step`` if given."""
    data = validate_corpus(corpus, cfg)
    state = opt_state or OptimizerState()
    params = _all_params(model, scaler)
    for p in params.values():
        p.requires_grad = True
    log: list[dict] = []
    log_file = writer = None
    if log_path is not None:
        log_path = Path(log_path)
        append = log_path.exists() and state.step > 0
        log_file = open(log_path, "a" if append else "w", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_COLUMNS)
        if not append:
            writer.writeheader()
    try:
        first = state.step
        for step in range(first, first + cfg.steps):
            deg, gt = sample_batch(data, cfg, step)
            lr = lr_at(step, cfg)
            tn.zero_grads(params.values())
            try:
                pred = refine(deg, scaler, model)
                total, sp, tm = loss_terms(pred, gt, cfg.loss_weights)
            except FloatingPointError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            tn.backward(total)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            adamw_step(params, grads, state, lr, cfg)
            row = {
                "step": step,
                "lr": lr,
                "loss_spatial": sp.item(),
                "loss_temporal": tm.item(),
                "loss_total": total.item(),
            }
            log.append(row)
            if writer is not None:
                writer.writerow(row)
            if progress is not None:
                progress(row)
            if checkpoint_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
                save_training_checkpoint(model, scaler, state, checkpoint_dir, step + 1)
    finally:
        if log_file is not None:
            log_file.close()
    tn.zero_grads(params.values())
    return TrainResult(model, scaler, log, state)


def save_training_checkpoint(model, scaler, state, directory, step: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"ckpt_{step:07d}.vdppm"
    save_model(model, path, scaler)
    save_optimizer(state, path.with_suffix(".vdppo"))
    return path


def save_optimizer(state: OptimizerState, path) -> None:
    blocks = {"step": np.array(float(state.step))}
    for name in state.m:
        blocks[f"m.{name}"] = state.m[name]
        blocks[f"v.{name}"] = state.v[name]
    with open(Path(path), "wb") as f:
        f.write(OPT_MAGIC)
        write_blocks(f, blocks)


def load_optimizer(path) -> OptimizerState:
    with open(Path(path), "rb") as f:
        _check_magic(f, OPT_MAGIC, "optimizer")
        blocks = read_blocks(f)
    if "step" not in blocks:
        raise ModelFormatError("optimizer file lacks a step counter")
    state = OptimizerState(step=int(blocks.pop("step")))
    for name, arr in blocks.items():
        kind, _, pname = name.partition(".")
        if kind == "m":
            state.m[pname] = arr
        elif kind == "v":
            state.v[pname] = arr
        else:
            raise ModelFormatError(f"unknown optimizer block {name!r}")
    return state

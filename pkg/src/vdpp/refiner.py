"""Compact spatial encoder + temporal-attention decoder predicting depth residuals.

The encoder patchifies the 3-channel manifold of each frame and runs a few
pre-norm transformer blocks over the patch tokens.  The decoder attends, for
every spatial token, across the k frames of a window and a zero-initialised
linear head turns each token back into a p x p residual patch.  A fresh model
is therefore an exact identity on the scaled input.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .depth_io import DepthSequence
from .geometry import ScalerParams, build_manifold, diff_scale, resampled_size, resize_to, resample_axis
from .tensor import Tensor

__all__ = [
    "RefinerConfig",
    "RefinerModel",
    "ModelFormatError",
    "init_model",
    "encode_frame",
    "encode_frames",
    "decode_window",
    "window_plan",
    "refine",
    "refine_sequence",
    "save_model",
    "load_model",
    "load_checkpoint",
    "write_blocks",
    "read_blocks",
]

MODEL_MAGIC = b"VDPPM1"
LN_EPS = 1e-5


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RefinerConfig:
    patch: int = 8
    embed_dim: int = 64
    heads: int = 4
    enc_blocks: int = 2
    dec_blocks: int = 1
    window: int = 16
    ratio: float = 0.5
    seed: int = 0
    pos_grid: int = 8
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("patch", "embed_dim", "heads", "pos_grid", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"RefinerConfig.{name} must be >= 1")
        if self.enc_blocks < 0 or self.dec_blocks < 0:
            raise ValueError("RefinerConfig block counts must be >= 0")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.window < 2:
            raise ValueError(f"window must be >= 2, got {self.window}")
        if not 0 < self.ratio <= 4:
            raise ValueError(f"ratio must lie in (0, 4], got {self.ratio}")

    @classmethod
    def from_dict(cls, d: dict) -> "RefinerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RefinerConfig keys: {sorted(unknown)}")
        return cls(**d)


def _block_layout(prefix: str, d: int, m: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.ln1.g", (d,)),
        (f"{prefix}.ln1.b", (d,)),
        (f"{prefix}.attn.qkv.w", (d, 3 * d)),
        (f"{prefix}.attn.qkv.b", (3 * d,)),
        (f"{prefix}.attn.out.w", (d, d)),
        (f"{prefix}.attn.out.b", (d,)),
        (f"{prefix}.ln2.g", (d,)),
        (f"{prefix}.ln2.b", (d,)),
        (f"{prefix}.mlp.fc1.w", (d, m * d)),
        (f"{prefix}.mlp.fc1.b", (m * d,)),
        (f"{prefix}.mlp.fc2.w", (m * d, d)),
        (f"{prefix}.mlp.fc2.b", (d,)),
    ]


def param_layout(cfg: RefinerConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; a pure function of the config."""
    d, p, m = cfg.embed_dim, cfg.patch, cfg.mlp_ratio
    layout = [
        ("patch_embed.w", (3 * p * p, d)),
        ("patch_embed.b", (d,)),
        ("pos_spatial", (cfg.pos_grid, cfg.pos_grid, d)),
        ("pos_temporal", (cfg.window, d)),
    ]
    for i in range(cfg.enc_blocks):
        layout += _block_layout(f"enc{i}", d, m)
    layout += [("enc_norm.g", (d,)), ("enc_norm.b", (d,))]
    for i in range(cfg.dec_blocks):
        layout += _block_layout(f"dec{i}", d, m)
    layout += [
        ("head.norm.g", (d,)),
        ("head.norm.b", (d,)),
        ("head.w", (d, p * p)),
        ("head.b", (p * p,)),
    ]
    return layout


class RefinerModel:
    def __init__(self, config: RefinerConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


def init_model(config: RefinerConfig | None = None) -> RefinerModel:
    cfg = config or RefinerConfig()
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_layout(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("head.w") or name == "head.b":
            arr = np.zeros(shape)
        elif name.startswith("pos_"):
            arr = rng.uniform(-0.02, 0.02, size=shape)
        elif leaf == "g":
            arr = np.ones(shape)
        elif leaf == "b":
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr, requires_grad=True)
    return RefinerModel(cfg, params)


# ---------------------------------------------------------------- layers


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = tn.matmul(x, w)
    return tn.add(y, tn.broadcast_to(b, y.shape))


def _layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    mu = tn.broadcast_to(tn.mean(x, -1, keepdims=True), x.shape)
    xc = tn.sub(x, mu)
    var = tn.mean(tn.mul(xc, xc), -1, keepdims=True)
    inv = tn.broadcast_to(tn.div(1.0, tn.sqrt(tn.add(var, LN_EPS))), x.shape)
    y = tn.mul(xc, inv)
    return tn.add(tn.mul(y, tn.broadcast_to(g, x.shape)), tn.broadcast_to(b, x.shape))


def _attention(x: Tensor, model: RefinerModel, prefix: str) -> Tensor:
    cfg = model.config
    bsz, length, d = x.shape
    h = cfg.heads
    dh = d // h
    qkv = _linear(x, model[f"{prefix}.attn.qkv.w"], model[f"{prefix}.attn.qkv.b"])
    qkv = tn.transpose(tn.reshape(qkv, (bsz, length, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = tn.mul(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = tn.matmul(tn.softmax_lastdim(scores), v)  # (B, h, L, dh)
    ctx = tn.reshape(tn.transpose(ctx, (0, 2, 1, 3)), (bsz, length, d))
    return _linear(ctx, model[f"{prefix}.attn.out.w"], model[f"{prefix}.attn.out.b"])


def _block(x: Tensor, model: RefinerModel, prefix: str) -> Tensor:
    y = _layer_norm(x, model[f"{prefix}.ln1.g"], model[f"{prefix}.ln1.b"])
    x = tn.add(x, _attention(y, model, prefix))
    y = _layer_norm(x, model[f"{prefix}.ln2.g"], model[f"{prefix}.ln2.b"])
    y = tn.gelu(_linear(y, model[f"{prefix}.mlp.fc1.w"], model[f"{prefix}.mlp.fc1.b"]))
    y = _linear(y, model[f"{prefix}.mlp.fc2.w"], model[f"{prefix}.mlp.fc2.b"])
    return tn.add(x, y)


def token_grid(h: int, w: int, patch: int) -> tuple[int, int]:
    return -(-h // patch), -(-w // patch)


def _pad_to_patch(x: Tensor, patch: int) -> Tensor:
    h, w = x.shape[-2:]
    gh, gw = token_grid(h, w, patch)
    if gh * patch != h:
        x = tn.take(x, np.minimum(np.arange(gh * patch), h - 1), -2)
    if gw * patch != w:
        x = tn.take(x, np.minimum(np.arange(gw * patch), w - 1), -1)
    return x


def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, C, h, w) -> (B, gh*gw, C*p*p) after edge-replication padding."""
    x = _pad_to_patch(x, patch)
    bsz, c, hp, wp = x.shape
    gh, gw = hp // patch, wp // patch
    x = tn.reshape(x, (bsz, c, gh, patch, gw, patch))
    x = tn.transpose(x, (0, 2, 4, 1, 3, 5))
    return tn.reshape(x, (bsz, gh * gw, c * patch * patch))


def _spatial_pos(model: RefinerModel, gh: int, gw: int) -> Tensor:
    pos = model["pos_spatial"]
    g = model.config.pos_grid
    if gh != g:
        pos = resample_axis(pos, 0, gh, gh / g)
    if gw != g:
        pos = resample_axis(pos, 1, gw, gw / g)
    return tn.reshape(pos, (gh * gw, model.config.embed_dim))


def encode_frames(manifold: Tensor, model: RefinerModel, use_pos: bool = True) -> Tensor:
    """(B, 3, h, w) manifolds -> (B, n_tokens, embed_dim) features."""
    cfg = model.config
    if manifold.ndim != 4 or manifold.shape[1] != 3:
        raise ValueError(f"encode_frames expects (B, 3, h, w), got {manifold.shape}")
    h, w = manifold.shape[-2:]
    gh, gw = token_grid(h, w, cfg.patch)
    x = _linear(patchify(manifold, cfg.patch), model["patch_embed.w"], model["patch_embed.b"])
    if use_pos:
        x = tn.add(x, tn.broadcast_to(_spatial_pos(model, gh, gw), x.shape))
    for i in range(cfg.enc_blocks):
        x = _block(x, model, f"enc{i}")
    return _layer_norm(x, model["enc_norm.g"], model["enc_norm.b"])


def encode_frame(manifold, model: RefinerModel) -> Tensor:
    """Single (3, h, w) manifold -> (n_tokens, embed_dim)."""
    m = manifold if isinstance(manifold, Tensor) else Tensor(manifold)
    out = encode_frames(tn.reshape(m, (1,) + m.shape), model)
    return tn.reshape(out, out.shape[1:])


def decode_windows(feats: Tensor, model: RefinerModel, out_hw: tuple[int, int]) -> Tensor:
    """(Bw, k, N, D) window features -> (Bw, k, h, w) residuals."""
    cfg = model.config
    bw, k, n, d = feats.shape
    if k != cfg.window:
        raise ValueError(f"window holds {k} frames, model expects {cfg.window}")
    h, w = out_hw
    gh, gw = token_grid(h, w, cfg.patch)
    if gh * gw != n:
        raise ValueError(f"{n} tokens do not match a {h}x{w} map with patch {cfg.patch}")
    x = tn.transpose(feats, (0, 2, 1, 3))  # (Bw, N, k, D)
    x = tn.add(x, tn.broadcast_to(model["pos_temporal"], x.shape))
    x = tn.reshape(x, (bw * n, k, d))
    for i in range(cfg.dec_blocks):
        x = _block(x, model, f"dec{i}")
    x = _layer_norm(x, model["head.norm.g"], model["head.norm.b"])
    x = _linear(x, model["head.w"], model["head.b"])  # (Bw*N, k, p*p)
    p = cfg.patch
    x = tn.reshape(x, (bw, gh, gw, k, p, p))
    x = tn.transpose(x, (0, 3, 1, 4, 2, 5))
    x = tn.reshape(x, (bw, k, gh * p, gw * p))
    if gh * p != h or gw * p != w:
        x = x[:, :, :h, :w]
    return x


def decode_window(features, model: RefinerModel, out_hw: tuple[int, int]) -> list[Tensor]:
    """k per-frame features (each n_tokens x D) -> k residual maps of size out_hw."""
    if len(features) != model.config.window:
        raise ValueError(f"window holds {len(features)} frames, model expects {model.config.window}")
    feats = tn.stack([f if isinstance(f, Tensor) else Tensor(f) for f in features], axis=0)
    res = decode_windows(tn.reshape(feats, (1,) + feats.shape), model, out_hw)
    return [res[0, t] for t in range(res.shape[1])]


def window_plan(T: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Frame indices per window and, per output frame, its flat window slot.

    Windows start at 0, k, 2k, ...; a partial tail is extended backward to
    length k and earlier windows keep the frames they already cover.  A
    sequence shorter than k is padded by repeating its last frame.
    """
    if T < 2:
        raise ValueError("need at least 2 frames")
    if T <= k:
        idx = np.minimum(np.arange(k), T - 1)[None, :]
        return idx, np.arange(T)
    starts = list(range(0, T - k + 1, k))
    if starts[-1] + k < T:
        starts.append(T - k)
    idx = np.array([np.arange(s, s + k) for s in starts])
    slot = np.empty(T, dtype=np.intp)
    owner = np.full(T, -1)
    for wi, s in enumerate(starts):
        for j in range(k):
            t = s + j
            if owner[t] < 0:
                owner[t] = wi
                slot[t] = wi * k + j
    return idx, slot


def refine(frames, scaler: ScalerParams, model: RefinerModel) -> Tensor:
    """Full pipeline on a (B, T, H, W) batch; returns refined depth (B, T, H, W)."""
    cfg = model.config
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float64))
    if x.ndim != 4:
        raise ValueError(f"refine expects (B, T, H, W), got {x.shape}")
    bsz, T, H, W = x.shape
    scaled = diff_scale(x, scaler)
    man = build_manifold(scaled, cfg.ratio)  # (B, T, 3, h, w)
    h, w = man.shape[-2:]
    feats = encode_frames(tn.reshape(man, (bsz * T, 3, h, w)), model)
    n, d = feats.shape[1:]
    feats = tn.reshape(feats, (bsz, T, n, d))
    idx, slot = window_plan(T, cfg.window)
    nw, k = idx.shape
    if nw == 1 and k == T:
        win = tn.reshape(feats, (bsz, k, n, d))
    else:
        win = tn.reshape(tn.take(feats, idx.reshape(-1), 1), (bsz * nw, k, n, d))
    res = tn.reshape(decode_windows(win, model, (h, w)), (bsz, nw * k, h, w))
    if not (nw == 1 and k == T):
        res = tn.take(res, slot, 1)
    up = resize_to(res, H, W, 1.0 / cfg.ratio)
    return tn.add(scaled, up)


def refine_sequence(seq, scaler: ScalerParams, model: RefinerModel) -> DepthSequence:
    frames = seq.frames if isinstance(seq, DepthSequence) else np.asarray(seq, dtype=np.float64)
    with tn.no_grad():
        out = refine(frames[None], scaler, model)
    fr = seq.frame_rate if isinstance(seq, DepthSequence) else None
    return DepthSequence(out.data[0], frame_rate=fr)


# ---------------------------------------------------------------- serialization


def write_blocks(f, blocks: dict[str, np.ndarray]) -> None:
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype("<f8").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ModelFormatError(f"truncated file: incomplete {what}")
    return buf


def read_blocks(f) -> dict[str, np.ndarray]:
    blocks: dict[str, np.ndarray] = {}
    while True:
        head = f.read(4)
        if not head:
            return blocks
        if len(head) != 4:
            raise ModelFormatError("truncated file: incomplete block header")
        (nlen,) = struct.unpack("<I", head)
        name = _read_exact(f, nlen, "parameter name").decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<I", _read_exact(f, 4, f"parameter {name!r}"))
        shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, f"parameter {name!r}"))
        count = int(np.prod(shape)) if rank else 1
        raw = _read_exact(f, 8 * count, f"parameter {name!r}")
        blocks[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def _check_magic(f, magic: bytes, kind: str) -> None:
    got = f.read(len(magic))
    if got[:-1] == magic[:-1] and got != magic:
        raise ModelFormatError(f"{kind} version mismatch: found {got!r}, expected {magic!r}")
    if got != magic:
        raise ModelFormatError(f"not a VDPP {kind} file")


def save_model(model: RefinerModel, path, scaler: ScalerParams | None = None) -> None:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    blocks = {k: v.data for k, v in model.params.items()}
    if scaler is not None:
        blocks["scaler.a"] = scaler.a.data
        blocks["scaler.b"] = scaler.b.data
    with open(Path(path), "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        write_blocks(f, blocks)


def load_checkpoint(path) -> tuple[RefinerModel, ScalerParams]:
    """Read a model file; the scaler defaults to a = b = 0 if not stored."""
    with open(Path(path), "rb") as f:
        _check_magic(f, MODEL_MAGIC, "model")
        (clen,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        try:
            cfg = RefinerConfig.from_dict(json.loads(_read_exact(f, clen, "config")))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ModelFormatError(f"corrupt model config: {exc}") from exc
        blocks = read_blocks(f)
    layout = dict(param_layout(cfg))
    scaler_vals = {"scaler.a": 0.0, "scaler.b": 0.0}
    params: dict[str, Tensor] = {}
    for name, arr in blocks.items():
        if name in scaler_vals:
            scaler_vals[name] = float(arr)
            continue
        if name not in layout:
            raise ModelFormatError(f"unknown parameter {name!r}")
        if tuple(arr.shape) != layout[name]:
            raise ModelFormatError(f"parameter {name!r} has shape {arr.shape}, expected {layout[name]}")
        params[name] = Tensor(arr, requires_grad=True)
    missing = [n for n in layout if n not in params]
    if missing:
        raise ModelFormatError(f"missing parameters: {missing[:3]}{'...' if len(missing) > 3 else ''}")
    params = {n: params[n] for n in layout}
    scaler = ScalerParams.create(scaler_vals["scaler.a"], scaler_vals["scaler.b"])
    return RefinerModel(cfg, params), scaler


def load_model(path) -> RefinerModel:
    return load_checkpoint(path)[0]

"""Command line entry point: ``vdpp {synth,train,stabilize,eval,sweep,bench}``.

Every option may also come from a JSON file passed with ``--config``; keys
are the long flag names without the leading dashes.  Flags given on the
command line win over the file, the file wins over built-in defaults, and
unknown keys are rejected.  Each run writes its resolved settings next to its
outputs as ``run_config.json``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import depth_io, metrics, synth
from . import tensor as tn
from .depth_io import DepthFormatError, DepthSequence
from .geometry import ScalerParams
from .objectives import LossWeights, loss_terms
from .refiner import (
    ModelFormatError,
    RefinerConfig,
    init_model,
    load_checkpoint,
    refine,
    refine_sequence,
    save_model,
)
from .trainer import (
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    load_optimizer,
    sample_batch,
    save_optimizer,
    train,
    validate_corpus,
)

CONFIG_NAME = "run_config.json"


class UsageError(Exception):
    pass


# name -> (type, default, help); store_true flags use type bool
_COMMON = {"config": (str, None, "JSON file of flag values")}

OPTIONS: dict[str, dict[str, tuple]] = {
    "synth": {
        "out": (str, None, "output directory"),
        "scenes": (int, 1, "number of scenes"),
        "t": (int, 16, "frames per scene"),
        "h": (int, 64, "frame height"),
        "w": (int, 64, "frame width"),
        "n-objects": (int, 3, "moving objects per scene"),
        "near": (float, 1.0, "nearest depth"),
        "far": (float, 4.0, "farthest depth"),
        "vmin": (float, 0.0, "minimum object speed (px/frame)"),
        "vmax": (float, 1.5, "maximum object speed (px/frame)"),
        "background": (str, "ramp", "constant or ramp"),
        "background-depth": (float, None, "depth of a constant background"),
        "seed": (int, 0, "scene seed (scene i uses seed + i)"),
        "lambda": (float, None, "write a scale-perturbed degraded/ twin"),
        "noise": (float, 0.0, "Gaussian noise sigma added to degraded frames"),
        "perturb-seed": (int, 1000, "perturbation seed (scene i uses seed + i)"),
    },
    "train": {
        "corpus": (str, None, "corpus directory with manifest.json"),
        "out": (str, None, "output directory"),
        "resume": (str, None, "checkpoint to continue from"),
        "published": (bool, False, "use the published long-schedule hyperparameters"),
        "steps": (int, 500, "optimisation steps"),
        "lr": (float, None, "base learning rate"),
        "eta-min": (float, None, "scheduler floor"),
        "T0": (int, None, "first restart period"),
        "Tmult": (int, None, "restart period multiplier"),
        "weight-decay": (float, 0.01, "decoupled weight decay"),
        "batch": (int, None, "clips per step"),
        "crop": (int, None, "square crop size"),
        "clip-len": (int, 16, "frames per clip"),
        "seed": (int, 0, "training seed"),
        "alpha": (float, 1.0, "spatial loss weight"),
        "beta": (float, 10.0, "temporal loss weight"),
        "strides": (str, "1", "comma separated TGM strides"),
        "window": (int, 16, "temporal window k"),
        "ratio": (float, 0.5, "downsampling ratio r"),
        "patch": (int, 8, "patch size"),
        "embed-dim": (int, 64, "token width"),
        "heads": (int, 4, "attention heads"),
        "enc-blocks": (int, 2, "encoder blocks"),
        "dec-blocks": (int, 1, "decoder blocks"),
        "model-seed": (int, 0, "weight initialisation seed"),
        "checkpoint-every": (int, 0, "save a checkpoint every N steps (0: off)"),
    },
    "stabilize": {
        "input": (str, None, "input sequence directory"),
        "model": (str, None, "model file"),
        "out": (str, None, "output directory"),
        "identity": (bool, False, "use a fresh zero-head model with a = b = 0"),
        "pattern": (str, "*.pfm", "frame filename pattern"),
        "disparity": (bool, False, "inputs are disparity; convert to depth"),
        "window": (int, 16, "temporal window k (identity mode)"),
        "ratio": (float, 0.5, "downsampling ratio r (identity mode)"),
    },
    "eval": {
        "pred": (str, None, "predicted sequence directory"),
        "gt": (str, None, "ground-truth sequence directory"),
        "out": (str, None, "CSV report path"),
        "no-align": (bool, False, "skip per-sequence scale/shift alignment"),
        "slitscan": (str, None, "row=R or column=C; writes scan PGMs next to the report"),
        "pattern": (str, "*.pfm", "frame filename pattern"),
        "disparity": (bool, False, "predictions are disparity; convert to depth"),
    },
    "sweep": {
        "gt": (str, None, "ground-truth sequence directory"),
        "constant-depth": (float, None, "use a generated constant-depth sequence instead"),
        "t": (int, 64, "frames of the generated sequence"),
        "h": (int, 64, "height of the generated sequence"),
        "w": (int, 64, "width of the generated sequence"),
        "out": (str, None, "CSV output path"),
        "grid": (str, None, "comma separated lambda values"),
        "grid-start": (float, 0.0, "first lambda"),
        "grid-stop": (float, 0.5, "last lambda (inclusive)"),
        "grid-step": (float, 0.05, "lambda step"),
        "seeds": (int, 20, "perturbation seeds per lambda"),
        "base-seed": (int, 0, "first perturbation seed"),
        "heatstrip": (str, None, "write a PGM strip of TGSE against lambda"),
    },
    "bench": {
        "input": (str, None, "input sequence directory"),
        "model": (str, None, "model file"),
        "identity": (bool, False, "bench a fresh model instead"),
        "warmup": (int, 2, "untimed warm-up runs"),
        "reps": (int, 5, "timed runs"),
        "window": (int, 16, "temporal window k (identity mode)"),
        "ratio": (float, 0.5, "downsampling ratio r (identity mode)"),
        "pattern": (str, "*.pfm", "frame filename pattern"),
        "out": (str, None, "optional JSON report path"),
    },
}

REQUIRED = {
    "synth": ("out",),
    "train": ("corpus", "out"),
    "stabilize": ("input", "out"),
    "eval": ("pred", "gt"),
    "sweep": ("out",),
    "bench": ("input",),
}


def _dest(flag: str) -> str:
    return flag.replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vdpp", description="Video depth post-processing toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        sp = sub.add_parser(cmd)
        for flag, (typ, _default, help_) in {**_COMMON, **opts}.items():
            if typ is bool:
                sp.add_argument(f"--{flag}", dest=_dest(flag), action="store_true", default=None, help=help_)
            else:
                sp.add_argument(f"--{flag}", dest=_dest(flag), type=typ, default=None, help=help_)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge flags over the config file over defaults; keys are flag names."""
    opts = OPTIONS[command]
    file_vals: dict = {}
    if ns.config:
        try:
            file_vals = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {ns.config}: {exc}") from exc
        if not isinstance(file_vals, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(file_vals) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for '{command}': {unknown}")
    out = {}
    for flag, (typ, default, _h) in opts.items():
        val = getattr(ns, _dest(flag))
        if val is None:
            val = file_vals.get(flag, default)
        if val is not None and typ is not bool and not isinstance(val, typ):
            try:
                val = typ(val)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {flag}: {val!r}") from exc
        out[flag] = bool(val) if typ is bool else val
    missing = [f"--{k}" for k in REQUIRED[command] if out.get(k) is None]
    if missing:
        raise UsageError(f"missing required options: {', '.join(missing)}")
    return out


def echo_config(command: str, cfg: dict, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_NAME
    path.write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------- commands


def cmd_synth(c: dict) -> None:
    out = Path(c["out"])
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(c["scenes"]):
        spec = synth.SceneSpec(
            seed=c["seed"] + i,
            H=c["h"],
            W=c["w"],
            T=c["t"],
            n_objects=c["n-objects"],
            depth_range=(c["near"], c["far"]),
            velocity_range=(c["vmin"], c["vmax"]),
            background=c["background"],
            background_depth=c["background-depth"],
        )
        gt = synth.gen_scene(spec)
        sid = f"scene_{i:03d}"
        depth_io.save_sequence(gt, out / sid / "gt")
        entry = {"id": sid, "gt": f"{sid}/gt", "scene": spec.to_dict()}
        if c["lambda"] is not None:
            pseed = c["perturb-seed"] + i
            deg = synth.perturb_scale(gt, synth.PerturbSpec(lam=c["lambda"], seed=pseed))
            if c["noise"] > 0:
                deg = synth.perturb_noise(deg, c["noise"], pseed)
            depth_io.save_sequence(deg, out / sid / "degraded")
            entry.update(degraded=f"{sid}/degraded", perturb={"lambda": c["lambda"], "seed": pseed, "noise": c["noise"]})
        entries.append(entry)
    synth.write_manifest(out / "manifest.json", scenes=entries)
    print(f"wrote {len(entries)} scene(s) of {c['t']} frames to {out}")


def _load_corpus(root: Path) -> list[tuple[DepthSequence, DepthSequence]]:
    manifest = root / "manifest.json"
    if not manifest.exists():
        raise DepthFormatError(f"{root}: no manifest.json (create one with 'vdpp synth')")
    scenes = json.loads(manifest.read_text()).get("scenes", [])
    corpus = []
    for s in scenes:
        if "degraded" not in s:
            raise DepthFormatError(f"scene {s.get('id')}: corpus needs degraded sequences (synth --lambda)")
        corpus.append((depth_io.load_sequence(root / s["degraded"]), depth_io.load_sequence(root / s["gt"])))
    if not corpus:
        raise DepthFormatError(f"{root}: manifest lists no scenes")
    return corpus


def _train_config(c: dict) -> TrainConfig:
    base = TrainConfig.published() if c["published"] else TrainConfig()
    vals = base.to_dict()
    for flag, key in (("lr", "base_lr"), ("eta-min", "eta_min"), ("T0", "T0"), ("Tmult", "Tmult"), ("batch", "batch"), ("crop", "crop")):
        if c[flag] is not None:
            vals[key] = c[flag]
    vals.update(
        steps=c["steps"],
        weight_decay=c["weight-decay"],
        clip_len=c["clip-len"],
        seed=c["seed"],
        loss_weights=LossWeights(c["alpha"], c["beta"], tuple(int(s) for s in str(c["strides"]).split(","))),
    )
    return TrainConfig(**vals)


def cmd_train(c: dict) -> None:
    out = Path(c["out"])
    out.mkdir(parents=True, exist_ok=True)
    corpus = _load_corpus(Path(c["corpus"]))
    tcfg = _train_config(c)
    opt_state = None
    if c["resume"]:
        model, scaler = load_checkpoint(c["resume"])
        opt_path = Path(c["resume"]).with_suffix(".vdppo")
        if opt_path.exists():
            opt_state = load_optimizer(opt_path)
    else:
        model = init_model(
            RefinerConfig(
                patch=c["patch"],
                embed_dim=c["embed-dim"],
                heads=c["heads"],
                enc_blocks=c["enc-blocks"],
                dec_blocks=c["dec-blocks"],
                window=c["window"],
                ratio=c["ratio"],
                seed=c["model-seed"],
            )
        )
        scaler = ScalerParams.create()
    opt_state = opt_state or OptimizerState()
    data = validate_corpus(corpus, tcfg)
    deg, gt = sample_batch(data, tcfg, opt_state.step)
    with tn.no_grad():
        total, sp, tm = loss_terms(refine(deg, scaler, model), gt, tcfg.loss_weights)
    print(f"step {opt_state.step}: initial loss total={total.item():.6g} spatial={sp.item():.6g} temporal={tm.item():.6g}")
    res = train(
        model,
        scaler,
        data,
        tcfg,
        log_path=out / "loss_log.csv",
        checkpoint_dir=out / "checkpoints" if c["checkpoint-every"] else None,
        checkpoint_every=c["checkpoint-every"],
        opt_state=opt_state,
    )
    save_model(res.model, out / "model.vdppm", res.scaler)
    save_optimizer(res.opt_state, out / "model.vdppo")
    if res.log:
        last = res.log[-1]
        print(
            f"step {last['step']}: final loss total={last['loss_total']:.6g} "
            f"spatial={last['loss_spatial']:.6g} temporal={last['loss_temporal']:.6g}"
        )
    a, b = res.scaler.values()
    print(f"scaler a={a:.6g} b={b:.6g}; model written to {out / 'model.vdppm'}")


def _model_for(c: dict):
    if c["identity"]:
        return init_model(RefinerConfig(window=c["window"], ratio=c["ratio"])), ScalerParams.create(requires_grad=False)
    if not c["model"]:
        raise UsageError("either --model or --identity is required")
    return load_checkpoint(c["model"])


def cmd_stabilize(c: dict) -> None:
    model, scaler = _model_for(c)
    seq = depth_io.load_sequence(c["input"], c["pattern"])
    if c["disparity"]:
        seq = DepthSequence(depth_io.disparity_to_depth(seq.frames), names=seq.names)
    out = refine_sequence(seq, scaler, model)
    depth_io.save_sequence(out, c["out"])
    print(f"wrote {out.T} refined frames to {c['out']}")


def _sequence_dirs(root: Path, pattern: str) -> list[tuple[str, Path]]:
    import fnmatch

    if any(fnmatch.fnmatch(p.name, pattern) for p in root.iterdir() if p.is_file()):
        return [(root.name, root)]
    return [(p.name, p) for p in sorted(root.iterdir()) if p.is_dir()]


def cmd_eval(c: dict) -> None:
    pred_root, gt_root = Path(c["pred"]), Path(c["gt"])
    pairs = _sequence_dirs(pred_root, c["pattern"])
    gt_pairs = dict(_sequence_dirs(gt_root, c["pattern"]))
    if len(pairs) == 1 and len(gt_pairs) == 1:
        gt_pairs = {pairs[0][0]: next(iter(gt_pairs.values()))}
    mode = "none" if c["no-align"] else "per_sequence_scale_shift"
    rows = []
    for sid, pdir in pairs:
        if sid not in gt_pairs:
            raise DepthFormatError(f"no ground truth for sequence {sid}")
        pred = depth_io.load_sequence(pdir, c["pattern"])
        gt = depth_io.load_sequence(gt_pairs[sid], c["pattern"])
        p = depth_io.disparity_to_depth(pred.frames) if c["disparity"] else pred.frames
        if p.shape != gt.frames.shape:
            raise DepthFormatError(f"sequence {sid}: prediction {p.shape} vs ground truth {gt.frames.shape}")
        rep = metrics.evaluate(p, gt.frames, mode)
        rows.append(rep.row(sid))
        print(f"{sid}: AbsRel={rep.abs_rel:.6g} d1={rep.delta1:.6g} TGSE={rep.tgse:.6g} (x100 {rep.tgse_x100:.6g})")
        if c["slitscan"]:
            axis, _, idx = c["slitscan"].partition("=")
            if axis not in ("row", "column") or not idx.isdigit():
                raise UsageError("--slitscan expects row=R or column=C")
            base = Path(c["out"]).parent if c["out"] else pdir.parent
            lo = float(min(gt.frames.min(), p.min()))
            hi = float(max(gt.frames.max(), p.max()))
            for tag, arr in (("gt", gt.frames), ("pred", p)):
                img = depth_io.slit_scan(arr, axis, int(idx), lo, hi)
                depth_io.write_pgm(img, base / f"slitscan_{sid}_{tag}_{axis}{idx}.pgm")
    agg = {k: float(np.mean([r[k] for r in rows])) for k in ("abs_rel", "delta1", "tgse", "tgse_x100", "d2v_ms", "fps")}
    agg.update(sequence_id="mean", frames=int(sum(r["frames"] for r in rows)))
    rows.append(agg)
    if c["out"]:
        Path(c["out"]).parent.mkdir(parents=True, exist_ok=True)
        metrics.write_report_csv(rows, c["out"])


def _grid(c: dict) -> list[float]:
    if c["grid"]:
        return [float(v) for v in str(c["grid"]).split(",")]
    n = int(round((c["grid-stop"] - c["grid-start"]) / c["grid-step"])) + 1
    return [round(c["grid-start"] + i * c["grid-step"], 10) for i in range(n)]


def heat_strip(values, cell: int = 8, height: int = 16) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    row = depth_io.render_gray(v[None, :])
    return np.repeat(np.repeat(row, height, axis=0), cell, axis=1)


def cmd_sweep(c: dict) -> None:
    if c["gt"]:
        gt = depth_io.load_sequence(c["gt"])
    elif c["constant-depth"] is not None:
        gt = DepthSequence(np.full((c["t"], c["h"], c["w"]), float(c["constant-depth"])))
    else:
        raise UsageError("either --gt or --constant-depth is required")
    rows = synth.sweep(gt, _grid(c), c["seeds"], c["base-seed"])
    Path(c["out"]).parent.mkdir(parents=True, exist_ok=True)
    synth.write_sweep_csv(rows, c["out"])
    for r in rows:
        print(f"lambda={r['lambda']:.2f} TGSE={r['tgse_mean']:.6g} AbsRel={r['absrel_mean']:.6g}")
    if c["heatstrip"]:
        depth_io.write_pgm(heat_strip([r["tgse_mean"] for r in rows]), c["heatstrip"])


def cmd_bench(c: dict) -> None:
    model, scaler = _model_for(c)
    seq = depth_io.load_sequence(c["input"], c["pattern"])
    res = metrics.bench_d2v(model, scaler, seq, warmup=c["warmup"], reps=c["reps"])
    print(
        f"D2V {res.ms_per_frame:.3f} ms/frame, {res.fps:.1f} FPS "
        f"({res.frames} frames {res.height}x{res.width}, k={res.window}, warmup={res.warmup}, reps={res.reps})"
    )
    if c["out"]:
        Path(c["out"]).write_text(json.dumps(res.as_dict(), indent=2))


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "stabilize": cmd_stabilize,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def _echo_dir(command: str, c: dict) -> Path | None:
    if command in ("synth", "train", "stabilize"):
        return Path(c["out"])
    if command in ("eval", "sweep") and c.get("out"):
        return Path(c["out"]).parent
    if command == "bench" and c.get("out"):
        return Path(c["out"]).parent
    return None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(ns.command, ns)
    except UsageError as exc:
        print(f"vdpp {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    try:
        echo = _echo_dir(ns.command, cfg)
        if echo is not None:
            echo_config(ns.command, cfg, echo)
        COMMANDS[ns.command](cfg)
    except UsageError as exc:
        print(f"vdpp {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"vdpp {ns.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, FloatingPointError, IndexError, DepthFormatError, ModelFormatError) as exc:
        print(f"vdpp {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

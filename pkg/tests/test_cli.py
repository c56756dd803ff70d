import csv
import json

import numpy as np
import pytest

from vdpp import depth_io
from vdpp.cli import main

TINY_MODEL = ["--patch", "4", "--embed-dim", "8", "--heads", "2", "--enc-blocks", "1", "--window", "4"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    args = ["synth", "--out", str(root), "--scenes", "2", "--t", "6", "--h", "16", "--w", "16", "--lambda", "0.3"]
    assert main(args) == 0
    return root


def frames_of(d):
    return depth_io.load_sequence(d).frames


class TestSynth:
    def test_layout(self, corpus):
        assert len(list((corpus / "scene_000" / "gt").glob("frame_*.pfm"))) == 6
        assert (corpus / "scene_001" / "degraded" / "frame_00005.pfm").exists()
        manifest = json.loads((corpus / "manifest.json").read_text())
        assert [s["id"] for s in manifest["scenes"]] == ["scene_000", "scene_001"]

    def test_rerun_bit_identical(self, corpus, tmp_path):
        args = ["synth", "--out", str(tmp_path), "--scenes", "2", "--t", "6", "--h", "16", "--w", "16", "--lambda", "0.3"]
        assert main(args) == 0
        for f in sorted((corpus / "scene_001" / "degraded").glob("*.pfm")):
            assert f.read_bytes() == (tmp_path / "scene_001" / "degraded" / f.name).read_bytes()

    def test_degraded_ratio_constant_per_frame(self, corpus):
        gt = frames_of(corpus / "scene_000" / "gt")
        deg = frames_of(corpus / "scene_000" / "degraded")
        r = deg / gt
        # both are stored as float32, so the ratio agrees to single precision
        np.testing.assert_allclose(r, r[:, :1, :1] * np.ones_like(r), rtol=1e-6)

    def test_config_echo(self, corpus):
        cfg = json.loads((corpus / "run_config.json").read_text())
        assert cfg["command"] == "synth" and cfg["t"] == 6 and cfg["lambda"] == 0.3


class TestExitCodes:
    def test_missing_required(self, capsys):
        assert main(["synth"]) == 2
        assert "--out" in capsys.readouterr().err

    def test_unknown_flag(self):
        assert main(["synth", "--out", "x", "--bogus", "1"]) == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"out": str(tmp_path), "depth": 3}))
        assert main(["synth", "--config", str(tmp_path / "c.json")]) == 2
        assert "depth" in capsys.readouterr().err

    def test_flags_override_config(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"out": str(tmp_path / "o"), "t": 3, "h": 8, "w": 8}))
        assert main(["synth", "--config", str(tmp_path / "c.json"), "--t", "4"]) == 0
        assert len(list((tmp_path / "o" / "scene_000" / "gt").glob("*.pfm"))) == 4

    def test_missing_input_is_runtime_error(self, tmp_path):
        assert main(["stabilize", "--input", str(tmp_path / "nope"), "--out", str(tmp_path / "o"), "--identity"]) == 1

    def test_bad_value(self):
        assert main(["synth", "--out", "x", "--t", "many"]) == 2


class TestTrain:
    def test_train_and_resume(self, corpus, tmp_path, capsys):
        base = ["train", "--corpus", str(corpus), "--batch", "1", "--crop", "12", "--clip-len", "4", *TINY_MODEL]
        assert main(base + ["--out", str(tmp_path / "a"), "--steps", "2"]) == 0
        out = capsys.readouterr().out
        assert "initial loss" in out and "final loss" in out
        assert (tmp_path / "a" / "model.vdppm").exists() and (tmp_path / "a" / "model.vdppo").exists()
        resume = base + ["--out", str(tmp_path / "b"), "--steps", "1", "--resume", str(tmp_path / "a" / "model.vdppm")]
        assert main(resume) == 0
        with open(tmp_path / "b" / "loss_log.csv") as f:
            assert [int(r["step"]) for r in csv.DictReader(f)] == [2]

    def test_zero_steps_writes_untouched_model(self, corpus, tmp_path):
        args = ["train", "--corpus", str(corpus), "--out", str(tmp_path), "--steps", "0", "--batch", "1"]
        args += ["--crop", "12", "--clip-len", "4", *TINY_MODEL]
        assert main(args) == 0
        from vdpp.refiner import load_model

        assert not load_model(tmp_path / "model.vdppm")["head.w"].data.any()

    def test_corpus_without_degraded(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "c"), "--t", "4", "--h", "8", "--w", "8"]) == 0
        assert main(["train", "--corpus", str(tmp_path / "c"), "--out", str(tmp_path / "o")]) == 1


class TestStabilizeEval:
    def test_identity_round_trip(self, corpus, tmp_path):
        src = corpus / "scene_000" / "degraded"
        assert main(["stabilize", "--input", str(src), "--out", str(tmp_path / "s"), "--identity", "--window", "4"]) == 0
        np.testing.assert_array_equal(frames_of(tmp_path / "s"), frames_of(src))

    def test_self_eval(self, corpus, tmp_path):
        gt = corpus / "scene_000" / "gt"
        report = tmp_path / "r" / "report.csv"
        assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--out", str(report), "--slitscan", "row=8"]) == 0
        with open(report) as f:
            rows = list(csv.DictReader(f))
        assert [r["sequence_id"] for r in rows] == ["gt", "mean"]
        assert float(rows[0]["abs_rel"]) < 1e-12 and float(rows[0]["delta1"]) == 1.0
        assert float(rows[0]["tgse"]) < 1e-20
        scans = sorted(p.name for p in report.parent.glob("*.pgm"))
        assert scans == ["slitscan_gt_gt_row8.pgm", "slitscan_gt_pred_row8.pgm"]

    def test_multi_sequence(self, corpus, tmp_path):
        pred, gt = tmp_path / "pred", tmp_path / "gt"
        for sid in ("scene_000", "scene_001"):
            depth_io.save_sequence(depth_io.load_sequence(corpus / sid / "degraded"), pred / sid)
            depth_io.save_sequence(depth_io.load_sequence(corpus / sid / "gt"), gt / sid)
        assert main(["eval", "--pred", str(pred), "--gt", str(gt), "--out", str(tmp_path / "r.csv"), "--no-align"]) == 0
        with open(tmp_path / "r.csv") as f:
            rows = list(csv.DictReader(f))
        assert [r["sequence_id"] for r in rows] == ["scene_000", "scene_001", "mean"]
        assert float(rows[0]["tgse"]) > 0
        assert float(rows[2]["tgse_x100"]) == pytest.approx(100 * float(rows[2]["tgse"]))

    def test_shape_mismatch(self, corpus, tmp_path):
        depth_io.save_sequence(depth_io.DepthSequence(np.ones((6, 8, 8))), tmp_path / "p")
        assert main(["eval", "--pred", str(tmp_path / "p"), "--gt", str(corpus / "scene_000" / "gt")]) == 1


class TestSweepBench:
    def test_sweep(self, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        args = ["sweep", "--constant-depth", "1", "--t", "16", "--h", "8", "--w", "8", "--seeds", "5"]
        assert main(args + ["--out", str(out), "--heatstrip", str(tmp_path / "h.pgm")]) == 0
        with open(out) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 11
        assert float(rows[0]["tgse_mean"]) == 0.0 and float(rows[0]["absrel_mean"]) == 0.0
        assert depth_io.read_pgm(tmp_path / "h.pgm").shape == (16, 88)

    def test_bench(self, corpus, capsys):
        src = corpus / "scene_000" / "gt"
        assert main(["bench", "--input", str(src), "--identity", "--window", "4", "--warmup", "0", "--reps", "2"]) == 0
        out = capsys.readouterr().out
        assert "ms/frame" in out and "FPS" in out and "16x16" in out and "k=4" in out

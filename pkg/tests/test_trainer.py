import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdpp import refiner as rf
from vdpp import trainer as tr
from vdpp.geometry import ScalerParams
from vdpp.objectives import loss_terms
from vdpp.synth import PerturbSpec, SceneSpec, gen_scene, perturb_scale
from vdpp.tensor import Tensor
from vdpp.trainer import OptimizerState, TrainConfig

SMALL = rf.RefinerConfig(patch=4, embed_dim=8, heads=2, enc_blocks=1, dec_blocks=1, window=4, pos_grid=2, mlp_ratio=2)


@pytest.fixture(scope="module")
def corpus():
    out = []
    for i in range(2):
        gt = gen_scene(SceneSpec(seed=i, H=16, W=16, T=6))
        out.append((perturb_scale(gt, PerturbSpec(0.3, 100 + i)), gt))
    return out


@pytest.fixture
def cfg():
    return TrainConfig(batch=2, crop=12, clip_len=4, steps=3, T0=2)


class TestSchedule:
    def test_start(self):
        assert tr.lr_at(0, TrainConfig()) == 1e-3

    def test_mid_cycle_hand_value(self):
        c = TrainConfig.published()
        assert tr.lr_at(5000, c) == pytest.approx(5.005e-7, rel=1e-12)

    @pytest.mark.parametrize("step", [10000, 30000, 70000])
    def test_restarts(self, step):
        assert tr.lr_at(step, TrainConfig.published()) == pytest.approx(1e-6, rel=1e-15)

    def test_second_cycle_is_twice_as_long(self):
        c = TrainConfig.published()
        assert tr.lr_at(10000 + 10000, c) == pytest.approx(tr.lr_at(5000, c), rel=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_bounds(self, step):
        c = TrainConfig()
        assert c.eta_min <= tr.lr_at(step, c) <= c.base_lr

    def test_tmult_one(self):
        c = TrainConfig(Tmult=1, T0=10)
        assert tr.lr_at(13, c) == tr.lr_at(3, c)

    def test_negative_step(self):
        with pytest.raises(ValueError):
            tr.lr_at(-1, TrainConfig())


class TestAdamW:
    def test_zero_grad_no_decay(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        tr.adamw_step(p, {"w": np.zeros(2)}, OptimizerState(), 0.1, TrainConfig(weight_decay=0.0))
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_hand_value(self):
        p = {"w": Tensor(np.zeros(1))}
        tr.adamw_step(p, {"w": np.ones(1)}, OptimizerState(), 0.1, TrainConfig())
        assert p["w"].data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-15)

    def test_decay_factor(self):
        p = {"w": Tensor(np.array([2.0]))}
        st_ = OptimizerState()
        c = TrainConfig(weight_decay=0.5)
        for k in range(1, 4):
            tr.adamw_step(p, {"w": np.zeros(1)}, st_, 0.1, c)
            assert p["w"].data[0] == pytest.approx(2.0 * 0.95**k, rel=1e-15)

    def test_non_finite_names_parameter(self):
        p = {"enc0.ln1.g": Tensor(np.ones(2))}
        with pytest.raises(FloatingPointError, match="enc0.ln1.g"):
            tr.adamw_step(p, {"enc0.ln1.g": np.array([1.0, np.inf])}, OptimizerState(), 0.1, TrainConfig())

    def test_v_nonnegative(self):
        rng = np.random.default_rng(0)
        p = {"w": Tensor(rng.normal(size=5))}
        s = OptimizerState()
        for _ in range(5):
            tr.adamw_step(p, {"w": rng.normal(size=5)}, s, 0.01, TrainConfig())
        assert (s.v["w"] >= 0).all() and s.step == 5


class TestBatch:
    def test_deterministic(self, corpus, cfg):
        data = tr.validate_corpus(corpus, cfg)
        a, b = tr.sample_batch(data, cfg, 7), tr.sample_batch(data, cfg, 7)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    def test_colocated(self, corpus, cfg):
        data = tr.validate_corpus(corpus, cfg)
        deg, gt = tr.sample_batch(data, cfg, 3)
        assert deg.shape == (2, 4, 12, 12)
        # each degraded clip is gt times one factor per frame, so the crops line up
        ratio = deg / gt
        np.testing.assert_allclose(ratio, ratio[:, :, :1, :1] * np.ones_like(ratio), rtol=1e-13)

    def test_full_crop_is_identity(self, corpus):
        c = TrainConfig(batch=1, crop=16, clip_len=6)
        data = tr.validate_corpus(corpus, c)
        _, gt = tr.sample_batch(data, c, 0)
        assert any(np.array_equal(gt[0], g) for _, g in data)

    def test_corpus_too_small(self, corpus):
        with pytest.raises(ValueError, match="crop"):
            tr.validate_corpus(corpus, TrainConfig(crop=32, clip_len=4))
        with pytest.raises(ValueError, match="clip_len"):
            tr.validate_corpus(corpus, TrainConfig(crop=8, clip_len=8))


class TestTrain:
    def test_zero_steps(self, corpus, cfg):
        model = rf.init_model(SMALL)
        before = model.state()
        cfg.steps = 0
        res = tr.train(model, ScalerParams.create(), corpus, cfg)
        assert res.log == []
        for k, v in before.items():
            assert model[k].data.tobytes() == v.tobytes()

    def test_first_loss_is_identity_loss(self, corpus, cfg):
        data = tr.validate_corpus(corpus, cfg)
        deg, gt = tr.sample_batch(data, cfg, 0)
        expected = loss_terms(deg, gt, cfg.loss_weights)[0].item()
        res = tr.train(rf.init_model(SMALL), ScalerParams.create(), corpus, cfg)
        assert res.log[0]["loss_total"] == expected

    def test_log_columns_consistent(self, corpus, cfg, tmp_path):
        tr.train(rf.init_model(SMALL), ScalerParams.create(), corpus, cfg, log_path=tmp_path / "log.csv")
        with open(tmp_path / "log.csv") as f:
            rows = list(csv.DictReader(f))
        assert [int(r["step"]) for r in rows] == [0, 1, 2]
        w = cfg.loss_weights
        for r in rows:
            total = w.alpha * float(r["loss_spatial"]) + w.beta * float(r["loss_temporal"])
            assert abs(float(r["loss_total"]) - total) < 1e-12

    def test_reproducible(self, corpus, cfg):
        logs = [tr.train(rf.init_model(SMALL), ScalerParams.create(), corpus, cfg).log for _ in range(2)]
        assert logs[0] == logs[1]

    def test_parameters_move(self, corpus, cfg):
        scaler = ScalerParams.create()
        model = rf.init_model(SMALL)
        tr.train(model, scaler, corpus, cfg)
        assert model["head.w"].data.any()
        assert scaler.values() != (0.0, 0.0)

    def test_resume_matches_uninterrupted(self, corpus, cfg, tmp_path):
        full_cfg = TrainConfig(**{**cfg.__dict__, "steps": 4})
        full = tr.train(rf.init_model(SMALL), ScalerParams.create(), corpus, full_cfg)

        half_cfg = TrainConfig(**{**cfg.__dict__, "steps": 2})
        first = tr.train(rf.init_model(SMALL), ScalerParams.create(), corpus, half_cfg)
        rf.save_model(first.model, tmp_path / "m.vdppm", first.scaler)
        tr.save_optimizer(first.opt_state, tmp_path / "m.vdppo")
        model, scaler = rf.load_checkpoint(tmp_path / "m.vdppm")
        state = tr.load_optimizer(tmp_path / "m.vdppo")
        second = tr.train(model, scaler, corpus, half_cfg, opt_state=state)
        assert [r["step"] for r in second.log] == [2, 3]
        assert first.log + second.log == full.log

    def test_checkpoints(self, corpus, cfg, tmp_path):
        tr.train(rf.init_model(SMALL), ScalerParams.create(), corpus, cfg, checkpoint_dir=tmp_path, checkpoint_every=1)
        assert sorted(p.name for p in tmp_path.glob("*.vdppm")) == [f"ckpt_{i:07d}.vdppm" for i in (1, 2, 3)]

    def test_divergence_reports_step(self, corpus, cfg):
        model = rf.init_model(SMALL)
        model["head.w"].data[:] = 1e308
        with pytest.raises(tr.TrainingDiverged) as exc:
            tr.train(model, ScalerParams.create(), corpus, cfg)
        assert exc.value.step == 0


def test_optimizer_round_trip(tmp_path):
    s = OptimizerState(m={"a": np.arange(3.0)}, v={"a": np.ones(3)}, step=17)
    tr.save_optimizer(s, tmp_path / "o.vdppo")
    back = tr.load_optimizer(tmp_path / "o.vdppo")
    assert back.step == 17
    np.testing.assert_array_equal(back.m["a"], s.m["a"])
    np.testing.assert_array_equal(back.v["a"], s.v["a"])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eta_min=1.0)
    with pytest.raises(ValueError):
        TrainConfig(clip_len=1)


def test_published_values():
    c = TrainConfig.published()
    assert (c.base_lr, c.T0, c.Tmult, c.eta_min, c.batch, c.crop) == (1e-6, 10000, 2, 1e-9, 16, 224)
    assert math.isclose(tr.lr_at(0, c), 1e-6)

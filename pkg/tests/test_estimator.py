import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lumen import autodiff as ad
from lumen import estimator as est
from lumen.gradcheck import end_to_end_check, tiny_model_config
from lumen.lightmath import LightColor, encode_angle
from lumen.scenegen import LightGT

TINY = tiny_model_config(16)


def heads(vec):
    """Build (pan, tilt, rgb) head tensors from one 7-vector."""
    v = np.asarray(vec, dtype=float)[None, :]
    return ad.Tensor(v[:, 0:2]), ad.Tensor(v[:, 2:4]), ad.Tensor(v[:, 4:7])


GT0 = LightGT(0.0, 0.0, LightColor(1.0, 0.5, 0.25))


class TestModel:
    def test_default_forward_arity(self):
        m = est.build_model(est.ModelConfig(), 0)
        out = m.raw_outputs(np.random.default_rng(0).random((1, 3, 64, 64)))
        assert out.shape == (1, 7)

    def test_inception_concat_width(self):
        store = ad.ParamStore()
        c = est.add_inception_params(store, np.random.default_rng(0), "blk", 16, (8, 8, 8, 8))
        y = est.inception_forward(store, "blk", ad.Tensor(np.random.default_rng(1).random((2, 16, 6, 6))))
        assert c == 32 and y.shape == (2, 32, 6, 6)

    def test_inception_uses_factorized_kernels(self):
        store = ad.ParamStore()
        est.add_inception_params(store, np.random.default_rng(0), "blk", 4, (2, 2, 2, 2))
        kernels = {t.shape[2:] for name, t in store if name.endswith(".w")}
        assert kernels == {(1, 1), (1, 3), (3, 1)}

    def test_same_seed_same_params(self):
        a = est.build_model(TINY, 3)
        b = est.build_model(TINY, 3)
        for (na, ta), (nb, tb) in zip(a.params, b.params):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    @pytest.mark.parametrize(
        "kw",
        [
            {"stem_channels": 0},
            {"stages": ()},
            {"stages": (("inception", 6),)},
            {"stages": (("dense", 8),)},
            {"input_size": 16, "stages": (("pool", 0),) * 4},
        ],
    )
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            est.ModelConfig(**kw)

    @settings(max_examples=10, deadline=None)
    @given(st.floats(-1e3, 1e3))
    def test_output_ranges(self, scale):
        m = est.build_model(TINY, 0)
        x = scale * np.random.default_rng(0).standard_normal((2, 3, 16, 16))
        out = m.raw_outputs(x)
        assert np.all(np.abs(out[:, :4]) <= 1.0)
        assert np.all((out[:, 4:] >= 0.0) & (out[:, 4:] <= 1.0))


class TestLoss:
    def test_perfect_prediction_is_clamp_floor(self):
        vec = [*encode_angle(0.0), *encode_angle(0.0), 1.0, 0.5, 0.25]
        terms = est.total_loss(heads(vec), est.Targets.from_gts([GT0]))
        assert terms.pan == 0.0 and terms.tilt == 0.0
        assert terms.total.item() == pytest.approx(math.sqrt(2e-6), rel=1e-3)

    def test_zero_heads(self):
        vec = [0, 0, 0, 0, 1.0, 0.5, 0.25]
        w = est.LossWeights(2.0, 3.0, 1.0)
        terms = est.total_loss(heads(vec), est.Targets.from_gts([GT0]), w)
        assert terms.pan == pytest.approx(0.5) and terms.tilt == pytest.approx(0.5)
        assert terms.total.item() == pytest.approx(2.0 * 0.5 + 3.0 * 0.5 + terms.color)

    def test_weight_linearity(self):
        vec = [0.3, 0.1, -0.2, 0.9, 0.4, 0.5, 0.6]
        gt = LightGT(40.0, -30.0, LightColor(1.0, 0.8, 0.6))
        t = est.Targets.from_gts([gt])
        one = est.total_loss(heads(vec), t, est.LossWeights(1, 1, 1))
        two = est.total_loss(heads(vec), t, est.LossWeights(2, 1, 1))
        assert two.total.item() - one.total.item() == pytest.approx(one.pan, rel=1e-12)

    def test_literal_flag_changes_pan_term(self):
        # residuals (+0.5, -0.5) cancel only in the literal form
        s, c = encode_angle(30.0)
        vec = [s + 0.5, c - 0.5, 0.0, 1.0, 1, 1, 1]
        gt = LightGT(30.0, 0.0, LightColor(1, 1, 1))
        t = est.Targets.from_gts([gt])
        assert est.total_loss(heads(vec), t).pan == pytest.approx(0.25)
        assert est.total_loss(heads(vec), t, literal_residual_sum=True).pan == pytest.approx(0.0, abs=1e-15)

    @given(
        st.lists(st.floats(-1, 1), min_size=4, max_size=4),
        st.lists(st.floats(0.01, 1), min_size=3, max_size=3),
        st.floats(-180, 180),
        st.floats(-90, 90),
    )
    def test_non_negative(self, sc, rgb, pan, tilt):
        gt = LightGT(pan, tilt, LightColor(0.9, 0.7, 0.5))
        assert est.total_loss(heads(sc + rgb), est.Targets.from_gts([gt])).total.item() >= 0.0

    @given(st.floats(1e-2, 1e2))
    def test_color_scale_invariance(self, k):
        gt = LightGT(0.0, 0.0, LightColor(0.9, 0.7, 0.5))
        t = est.Targets.from_gts([gt])
        a = est.total_loss(heads([0, 1, 0, 1, 0.2, 0.3, 0.4]), t).color
        b = est.total_loss(heads([0, 1, 0, 1, 0.2 * k, 0.3 * k, 0.4 * k]), t).color
        assert b == pytest.approx(a, abs=1e-12)

    def test_estimate_loss_matches(self):
        e = est.LightEstimate(0.1, 0.9, -0.3, 0.8, (0.5, 0.5, 0.2))
        gt = LightGT(10.0, -20.0, LightColor(1.0, 0.9, 0.3))
        direct = est.total_loss(heads([0.1, 0.9, -0.3, 0.8, 0.5, 0.5, 0.2]), est.Targets.from_gts([gt])).total.item()
        assert est.estimate_loss(e, gt) == direct

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            est.LossWeights(0, 0, 0)
        with pytest.raises(ValueError):
            est.LossWeights(-1, 1, 1)


class TestPredict:
    def test_decode_identity(self):
        e = est.LightEstimate.from_vector([0, 1, 0, 1, 0.2, 0.3, 0.4])
        assert e.delta_pan == 0.0 and e.delta_tilt == 0.0

    def test_decode_90(self):
        assert est.LightEstimate.from_vector([1, 0, 0, 1, 1, 1, 1]).delta_pan == 90.0

    @given(st.floats(0.01, 100), st.floats(-179, 179))
    def test_joint_scaling(self, k, angle):
        s, c = encode_angle(angle)
        a = est.LightEstimate.from_vector([s, c, 0, 1, 1, 1, 1]).delta_pan
        b = est.LightEstimate.from_vector([k * s, k * c, 0, 1, 1, 1, 1]).delta_pan
        assert b == pytest.approx(a, abs=1e-9)

    def test_encode_decode_identity(self):
        rng = np.random.default_rng(0)
        for pan, tilt in zip(rng.uniform(-180, 180, 2000), rng.uniform(-90, 90, 2000)):
            e = est.LightEstimate.from_vector([*encode_angle(pan), *encode_angle(tilt), 1, 1, 1])
            assert abs(e.delta_pan - pan) < 1e-9 and abs(e.delta_tilt - tilt) < 1e-9

    def test_resolution_mismatch(self):
        m = est.build_model(TINY, 0)
        with pytest.raises(ValueError):
            est.predict(m, np.zeros((32, 32, 3), dtype=np.uint8))

    def test_predict_uint8(self):
        m = est.build_model(TINY, 0)
        img = np.random.default_rng(2).integers(0, 256, (16, 16, 3), dtype=np.uint8)
        pan, tilt, color = est.predict(m, img)
        assert -180 < pan <= 180 and -180 < tilt <= 180
        assert all(0 <= c <= 1 for c in color)


class TestSchedule:
    def test_patience_five(self):
        s = est.PlateauScheduler(2e-4, 0.1, 5)
        s.step(1.0)
        for _ in range(4):
            assert s.step(1.0) == 2e-4
        assert s.step(1.0) == pytest.approx(2e-5)

    def test_small_improvement_counts_as_plateau(self):
        s = est.PlateauScheduler(1.0, 0.1, 2, threshold=1e-4)
        s.step(1.0)
        s.step(1.0 - 5e-5)
        assert s.step(1.0 - 9e-5) == pytest.approx(0.1)

    def test_improvement_resets(self):
        s = est.PlateauScheduler(1.0, 0.5, 2)
        s.step(1.0)
        s.step(1.0)
        s.step(0.5)
        assert s.step(0.5) == 1.0

    @pytest.mark.parametrize("kw", [{"batch_size": 0}, {"plateau_factor": 1.0}, {"plateau_factor": 0.0}])
    def test_bad_train_config(self, kw):
        with pytest.raises(ValueError):
            est.TrainConfig(**kw)


def _toy_data(n=8, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3, 16, 16))
    gts = [
        LightGT(float(rng.uniform(-180, 180)), float(rng.uniform(-60, 20)), LightColor(*rng.uniform(0.3, 1, 3)))
        for _ in range(n)
    ]
    return x, gts


class TestFit:
    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            est.fit(est.build_model(TINY, 0), np.zeros((0, 3, 16, 16)), [])

    def test_deterministic_curve(self):
        x, gts = _toy_data()
        cfg = est.TrainConfig(batch_size=4, max_epochs=3, lr=1e-3)
        a = est.fit(est.build_model(TINY, 1), x, gts, cfg)
        b = est.fit(est.build_model(TINY, 1), x, gts, cfg)
        assert [e.train_loss for e in a] == [e.train_loss for e in b]

    def test_loss_decreases_and_logs(self, tmp_path):
        x, gts = _toy_data()
        cfg = est.TrainConfig(batch_size=8, max_epochs=30, lr=5e-3, plateau_patience=50)
        log = est.fit(est.build_model(TINY, 2), x, gts, cfg, val=(x[:4], gts[:4]), checkpoint_dir=tmp_path)
        assert len(log) == 30
        assert log[-1].train_loss < 0.7 * log[0].train_loss
        assert all(e.val_loss is not None and e.lr == 5e-3 for e in log)
        assert (tmp_path / "last.lpckpt").exists()

    def test_max_steps(self):
        x, gts = _toy_data()
        log = est.fit(est.build_model(TINY, 0), x, gts, est.TrainConfig(batch_size=2, max_epochs=10, max_steps=5))
        assert log[-1].steps == 5

    def test_lr_drops_on_flat_validation(self):
        x, gts = _toy_data(4)
        cfg = est.TrainConfig(batch_size=4, max_epochs=8, lr=1e-12, plateau_patience=2)
        log = est.fit(est.build_model(TINY, 0), x, gts, cfg, val=(x, gts))
        assert log[0].lr == 1e-12 and log[-1].lr < 1e-12


class TestCheckpoint:
    def test_roundtrip_bytes(self, tmp_path):
        x, gts = _toy_data(4)
        m = est.build_model(TINY, 5)
        est.fit(m, x, gts, est.TrainConfig(batch_size=4, max_epochs=2))
        p1, p2 = tmp_path / "a.lpckpt", tmp_path / "b.lpckpt"
        est.save_checkpoint(p1, m, {"epoch": 1})
        loaded, state = est.load_checkpoint(p1)
        est.save_checkpoint(p2, loaded, state)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.cfg == m.cfg and loaded.params.step == m.params.step == 2
        np.testing.assert_array_equal(loaded.raw_outputs(x), m.raw_outputs(x))

    def test_magic(self, tmp_path):
        m = est.build_model(TINY, 0)
        data = est.checkpoint_bytes(m)
        assert data.startswith(b"LPCKPT1")
        with pytest.raises(ValueError):
            est.load_checkpoint_bytes(b"NOTACKPT" + data[8:])

    def test_resumed_training_matches(self):
        x, gts = _toy_data(4)
        cfg = est.TrainConfig(batch_size=4, max_epochs=1, shuffle=False)
        a = est.build_model(TINY, 0)
        est.fit(a, x, gts, cfg)
        b, _ = est.load_checkpoint_bytes(est.checkpoint_bytes(a))
        est.fit(a, x, gts, cfg)
        est.fit(b, x, gts, cfg)
        for (_, ta), (_, tb) in zip(a.params, b.params):
            np.testing.assert_array_equal(ta.data, tb.data)


class TestEndToEndGradient:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_total_loss_matches_fd(self, seed):
        results = end_to_end_check(seed)
        worst = max(results, key=lambda r: r.max_rel_error)
        assert worst.passed, worst

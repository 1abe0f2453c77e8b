import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lumen import autodiff as ad
from lumen import gradcheck as gc


def leaf(a):
    return ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestTensor:
    def test_grad_allocated_iff_requires_grad(self):
        assert ad.Tensor([1.0, 2.0]).grad is None
        t = ad.Tensor([1.0, 2.0], requires_grad=True)
        assert t.grad.shape == (2,) and not t.grad.any()

    def test_rank_limit(self):
        with pytest.raises(ValueError):
            ad.Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_double_backward_rejected(self):
        x = leaf([1.0, -2.0, 3.0])
        y = ad.mse(ad.tanh(x), np.zeros(3))
        y.backward()
        first = x.grad.copy()
        with pytest.raises(ad.GraphError):
            y.backward()
        np.testing.assert_array_equal(x.grad, first)

    def test_backward_needs_scalar(self):
        with pytest.raises(ad.GraphError):
            ad.tanh(leaf([1.0, 2.0])).backward()

    def test_shared_subexpression_accumulates(self):
        x = leaf([0.3, -0.7])
        h = ad.tanh(x)
        y = ad.mse(ad.add(h, h), np.zeros(2))
        y.backward()
        t = np.tanh(x.data)
        expected = 2.0 * (2 * t) / 2 * 2 * (1 - t * t)
        np.testing.assert_allclose(x.grad, expected, rtol=1e-14)


class TestConv:
    def test_ones_sum(self):
        out = ad.conv2d(ad.Tensor(np.ones((1, 1, 3, 3))), ad.Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 5, 4))
        w = np.eye(3).reshape(3, 3, 1, 1)
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_asymmetric_kernel_grad(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 1, 3))
        b = rng.standard_normal(4)
        # conv is linear in each argument, so a wide step has no truncation error
        err = gc.check_function(lambda t: ad.conv2d(t[0], t[1], t[2]), [x, w, b], rng, step=1e-4)
        assert err < 1e-6

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 5, 6))
        w = rng.standard_normal((3, 2, 3, 2))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), stride=1, padding=(1, 0)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)))
        ref = np.zeros((1, 3, 5, 5))
        for k in range(3):
            for i in range(5):
                for j in range(5):
                    ref[0, k, i, j] = (xp[0, :, i : i + 3, j : j + 2] * w[k]).sum()
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize(
        "xs, ws, kw",
        [
            ((1, 2, 4, 4), (1, 3, 1, 1), {}),
            ((1, 1, 4, 4), (1, 1, 3, 3), {"stride": 2}),
            ((1, 1, 2, 2), (1, 1, 3, 3), {}),
            ((1, 1, 4), (1, 1, 3, 3), {}),
        ],
    )
    def test_shape_errors(self, xs, ws, kw):
        with pytest.raises(ValueError):
            ad.conv2d(ad.Tensor(np.zeros(xs)), ad.Tensor(np.zeros(ws)), **kw)

    def test_bias_shape_error(self):
        with pytest.raises(ValueError):
            ad.conv2d(ad.Tensor(np.zeros((1, 1, 3, 3))), ad.Tensor(np.zeros((2, 1, 1, 1))), ad.Tensor(np.zeros(3)))


class TestSmallOps:
    def test_relu_values_and_grads(self):
        x = leaf([-2.0, 3.0])
        y = ad.relu(x)
        np.testing.assert_array_equal(y.data, [0.0, 3.0])
        y.backward(np.ones(2))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_concat_split(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng.standard_normal((2, 8, 3, 3))), leaf(rng.standard_normal((2, 16, 3, 3)))
        y = ad.concat_channels([a, b])
        assert y.shape == (2, 24, 3, 3)
        g = rng.standard_normal(y.shape)
        y.backward(g)
        np.testing.assert_array_equal(a.grad, g[:, :8])
        np.testing.assert_array_equal(b.grad, g[:, 8:])

    def test_concat_mismatch(self):
        with pytest.raises(ValueError):
            ad.concat_channels([ad.Tensor(np.zeros((1, 2, 3, 3))), ad.Tensor(np.zeros((1, 2, 4, 3)))])

    def test_maxpool_routing(self):
        x = leaf(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        y = ad.maxpool2(x)
        assert y.item() == 4.0
        y.backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[0.0, 0.0], [0.0, 1.0]])

    def test_maxpool_same_padding_shape(self):
        y = ad.maxpool2d(ad.Tensor(np.zeros((1, 2, 7, 5))), 3, 1, 1)
        assert y.shape == (1, 2, 7, 5)

    def test_maxpool_odd_drops_trailing(self):
        assert ad.maxpool2(ad.Tensor(np.zeros((1, 1, 5, 7)))).shape == (1, 1, 2, 3)

    def test_global_avg_pool(self):
        x = np.arange(2 * 3 * 4 * 5, dtype=float).reshape(2, 3, 4, 5)
        np.testing.assert_allclose(ad.global_avg_pool(ad.Tensor(x)).data[..., 0, 0], x.mean(axis=(2, 3)))

    def test_dense_shape_error(self):
        with pytest.raises(ValueError):
            ad.dense(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))))

    def test_add_shape_error(self):
        with pytest.raises(ValueError):
            ad.add(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros(4)))

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=12))
    def test_activation_ranges(self, vals):
        x = ad.Tensor(vals)
        assert np.all(np.abs(ad.tanh(x).data) <= 1.0)
        s = ad.sigmoid(x).data
        assert np.all((s >= 0.0) & (s <= 1.0))


class TestLosses:
    def test_mse_value(self):
        assert ad.mse(ad.Tensor([1.0, 2.0]), [0.0, 0.0]).item() == 2.5

    def test_mse_zero(self):
        x = leaf([0.1, 0.2, 0.3])
        y = ad.mse(x, [0.1, 0.2, 0.3])
        assert y.item() == 0.0
        y.backward()
        assert not x.grad.any()

    def test_mse_grad_formula(self):
        rng = np.random.default_rng(7)
        p, t = rng.standard_normal(7), rng.standard_normal(7)
        x = leaf(p)
        ad.mse(x, t).backward()
        np.testing.assert_allclose(x.grad, 2 * (p - t) / 7, rtol=1e-14)
        num = gc.numeric_grad(lambda: ad.mse(ad.Tensor(p), t).item(), p)
        assert gc.rel_error(x.grad, num) < 1e-8

    def test_mse_shape_error(self):
        with pytest.raises(ValueError):
            ad.mse(ad.Tensor([1.0, 2.0]), [1.0])

    def test_summed_residual_cancellation(self):
        # opposite-sign residuals cancel in the literal form but not in mse
        pred = ad.Tensor([[1.0, -1.0]])
        assert ad.summed_residual_mse(pred, [[0.0, 0.0]]).item() == 0.0
        assert ad.mse(pred, [[0.0, 0.0]]).item() == 1.0

    def test_cosine_clamp_floor(self):
        v = np.array([0.3, 0.5, 0.2])
        loss = ad.cosine_angle_loss(ad.Tensor(v), v).item()
        assert loss == pytest.approx(math.sqrt(2e-6), rel=1e-3)
        assert loss == pytest.approx(math.acos(1 - 1e-6), rel=1e-12)

    def test_cosine_orthogonal(self):
        assert ad.cosine_angle_loss(ad.Tensor([1.0, 0, 0]), [0, 1.0, 0]).item() == pytest.approx(math.pi / 2)

    def test_cosine_zero_vector(self):
        with pytest.raises(ValueError):
            ad.cosine_angle_loss(ad.Tensor([0.0, 0, 0]), [1.0, 0, 0])

    @pytest.mark.parametrize("seed", range(5))
    def test_cosine_grad(self, seed):
        rng = np.random.default_rng(seed)
        p, t = rng.uniform(0.05, 1, 3), rng.uniform(0.05, 1, 3)
        err = gc.check_function(lambda ts: ad.cosine_angle_loss(ts[0], t), [p], rng)
        assert err < 1e-5

    def test_cosine_grad_orthogonal_to_pred(self):
        rng = np.random.default_rng(4)
        x = leaf(rng.uniform(0.1, 1, 3))
        ad.cosine_angle_loss(x, rng.uniform(0.1, 1, 3)).backward()
        assert abs(np.dot(x.grad, x.data)) < 1e-14

    @given(st.floats(1e-3, 1e3))
    def test_cosine_scale_invariant(self, k):
        p, t = np.array([0.2, 0.7, 0.4]), np.array([0.5, 0.5, 0.1])
        a = ad.cosine_angle_loss(ad.Tensor(p), t).item()
        b = ad.cosine_angle_loss(ad.Tensor(k * p), t).item()
        assert b == pytest.approx(a, abs=1e-12)


class TestAdam:
    def _store(self, values, grads):
        s = ad.ParamStore()
        for i, (v, g) in enumerate(zip(values, grads)):
            t = s.add(f"p{i}", ad.Tensor(np.array(v, dtype=float), requires_grad=True))
            t.grad[...] = g
        return s

    def test_zero_grad_no_change(self):
        s = self._store([[1.0, -2.0]], [[0.0, 0.0]])
        ad.adam_step(s, 1e-2)
        np.testing.assert_array_equal(s["p0"].data, [1.0, -2.0])

    def test_first_step_is_lr(self):
        s = self._store([0.5], [1.0])
        ad.adam_step(s, 2e-4)
        # m_hat = 1, v_hat = 1 so the step is lr / (1 + eps)
        assert s["p0"].data.item() == pytest.approx(0.5 - 2e-4 / (1 + 1e-8), abs=1e-15)
        assert s["p0"].grad.item() == 0.0

    def test_reference_formula_three_steps(self):
        grads = [0.3, -1.2, 0.05]
        s = self._store([1.0], [0.0])
        w, m, v = 1.0, 0.0, 0.0
        for k, g in enumerate(grads, start=1):
            s["p0"].grad[...] = g
            ad.adam_step(s, 1e-3)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 1e-3 * (m / (1 - 0.9**k)) / (math.sqrt(v / (1 - 0.999**k)) + 1e-8)
        assert s["p0"].data.item() == pytest.approx(w, rel=1e-14)
        assert s.step == 3

    def test_deterministic(self):
        a = self._store([[0.1, 0.2]], [[0.4, -0.3]])
        b = self._store([[0.1, 0.2]], [[0.4, -0.3]])
        ad.adam_step(a, 1e-3)
        ad.adam_step(b, 1e-3)
        np.testing.assert_array_equal(a["p0"].data, b["p0"].data)

    def test_unique_names(self):
        s = ad.ParamStore()
        s.add("w", ad.Tensor([1.0], requires_grad=True))
        with pytest.raises(KeyError):
            s.add("w", ad.Tensor([2.0], requires_grad=True))

    def test_moments_shaped_like_params(self):
        s = self._store([np.zeros((2, 3)), np.zeros(4)], [np.zeros((2, 3)), np.zeros(4)])
        for name, t in s:
            assert s.m[name].shape == t.shape == s.v[name].shape
        assert s.count() == 10 and len(s) == 2


class TestHeNormal:
    def test_statistics(self):
        t = ad.he_normal_init(np.random.default_rng(0), (10_000,), fan_in=200)
        sigma = math.sqrt(2 / 200)
        assert abs(t.data.std() - sigma) < 0.1 * sigma
        assert abs(t.data.mean()) < 3 * sigma / math.sqrt(10_000)

    def test_same_seed_identical(self):
        a = ad.he_normal_init(np.random.default_rng(3), (4, 3, 3, 3), 27)
        b = ad.he_normal_init(np.random.default_rng(3), (4, 3, 3, 3), 27)
        np.testing.assert_array_equal(a.data, b.data)
        assert a.requires_grad

    def test_bad_fan_in(self):
        with pytest.raises(ValueError):
            ad.he_normal_init(np.random.default_rng(0), (2,), 0)


def _brute_jacobian(f, x, h=1e-6):
    y0 = f(x)
    jac = np.zeros((y0.size, x.size))
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        jac[:, i] = ((f(xp) - f(xm)) / (2 * h)).ravel()
    return jac


class TestChainRule:
    def test_three_op_composition(self):
        rng = np.random.default_rng(9)
        x0 = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))

        def fwd(arr):
            return ad.sigmoid(ad.maxpool2(ad.conv2d(ad.Tensor(arr), ad.Tensor(w), padding=1))).data

        jac = _brute_jacobian(fwd, x0)
        g = rng.standard_normal(fwd(x0).shape)
        x = leaf(x0)
        ad.sigmoid(ad.maxpool2(ad.conv2d(x, ad.Tensor(w), padding=1))).backward(g)
        np.testing.assert_allclose(x.grad.ravel(), g.ravel() @ jac, rtol=1e-6, atol=1e-9)


class TestUniversalSuite:
    def test_all_ops_pass(self):
        results = gc.run_op_suite(seed=0)
        failed = [r for r in results if not r.passed]
        assert not failed, failed

    def test_every_op_has_five_shapes(self):
        counts = {}
        for r in gc.run_op_suite(seed=1):
            counts[r.name] = counts.get(r.name, 0) + 1
        assert min(counts.values()) >= 5
        assert {"conv2d", "maxpool2d", "dense", "relu", "tanh", "sigmoid", "concat_channels",
                "global_avg_pool", "mse", "cosine_angle_loss"} <= set(counts)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_relu_tanh_chain_random_seeds(self, seed):
        rng = np.random.default_rng(seed)
        x = gc._away_from_zero(rng, (2, 3))
        err = gc.check_function(lambda t: ad.tanh(ad.relu(t[0])), [x], rng)
        assert err < 1e-5

"""Tests for the reverse-mode autodiff core, optimizer, and gradient oracle."""

import numpy as np
import pytest

from seqssl import numcore as nc


class TestForwardPrimitives:
    def test_softmax_symmetry(self):
        np.testing.assert_allclose(
            nc.softmax(nc.constant([0.0, 0.0, 0.0])).values, [1 / 3] * 3, rtol=0, atol=1e-15
        )

    def test_sigmoid_at_zero(self):
        assert nc.sigmoid(nc.constant(0.0)).item() == 0.5

    def test_matmul_identity(self):
        m = np.array([[1.5, -2.0], [0.25, 4.0]])
        out = nc.matmul(nc.constant(np.eye(2)), nc.constant(m))
        np.testing.assert_array_equal(out.values, m)

    def test_matmul_shape_mismatch_named(self):
        with pytest.raises(nc.ShapeError, match="matmul"):
            nc.matmul(nc.constant(np.zeros((2, 3))), nc.constant(np.zeros((2, 3))))

    def test_matmul_rank_mismatch_named(self):
        with pytest.raises(nc.ShapeError, match="matmul"):
            nc.matmul(nc.constant(np.zeros((2, 3))), nc.constant(np.zeros((4, 3, 5))))

    def test_gather_out_of_range(self):
        with pytest.raises(nc.ShapeError, match="gather"):
            nc.gather(nc.constant(np.zeros((3, 2))), [0, 3])

    def test_stable_sigmoid_extremes(self):
        out = nc.sigmoid(nc.constant([-800.0, 800.0])).values
        assert out[0] == 0.0 and out[1] == 1.0


class TestBackward:
    def test_quadratic_gradient(self):
        p = nc.Param("p", [1.0, 2.0])
        with nc.tape():
            nc.backward(nc.sum(nc.mul(p, p)))
        np.testing.assert_allclose(p.grad, [2.0, 4.0], rtol=0, atol=0)

    def test_cross_entropy_softmax_identity(self):
        # loss = -log softmax(o)_k  =>  grad_o = softmax(o) - one_hot(k)
        rng = np.random.default_rng(0)
        o = nc.Param("o", rng.normal(size=5))
        k = 2
        with nc.tape():
            logp = nc.log_softmax(nc.reshape(o, (1, 5)))
            nc.backward(nc.neg(nc.take(logp, (0, k))))
        expected = nc.softmax(nc.constant(o.values)).values.copy()
        expected[k] -= 1.0
        np.testing.assert_allclose(o.grad, expected, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        p = nc.Param("p", [1.0, 2.0])
        with nc.tape():
            with pytest.raises(nc.NumericsError, match="scalar"):
                nc.backward(nc.mul(p, p))

    def test_unreachable_param_keeps_zero_grad(self):
        used = nc.Param("used", [1.0])
        unused = nc.Param("unused", [1.0])
        with nc.tape():
            nc.backward(nc.sum(nc.mul(used, used)))
        np.testing.assert_array_equal(unused.grad, [0.0])

    def test_three_layer_composite_vs_finite_differences(self):
        rng = np.random.default_rng(7)
        w1 = nc.Param("w1", rng.normal(scale=0.5, size=(4, 6)))
        b1 = nc.Param("b1", rng.normal(scale=0.1, size=6))
        w2 = nc.Param("w2", rng.normal(scale=0.5, size=(6, 5)))
        b2 = nc.Param("b2", rng.normal(scale=0.1, size=5))
        w3 = nc.Param("w3", rng.normal(scale=0.5, size=(5, 3)))
        x = rng.normal(size=(8, 4))

        def build():
            h1 = nc.tanh(nc.add(nc.matmul(nc.constant(x), w1), b1))
            h2 = nc.sigmoid(nc.add(nc.matmul(h1, w2), b2))
            out = nc.softmax(nc.matmul(h2, w3))
            return nc.mean(nc.sum(nc.mul(out, nc.log(nc.add(out, 1e-8))), axis=1))

        report = nc.grad_check(build, [w1, b1, w2, b2, w3], step=1e-5, tol=1e-4)
        assert report.passed, report.failures()

    def test_weighted_sum_backward_matches_weighted_gradients(self):
        rng = np.random.default_rng(3)
        p = nc.Param("p", rng.normal(size=(3, 3)))
        x = rng.normal(size=(2, 3))
        weights = (0.6, 0.3, 0.1)

        def losses():
            h = nc.matmul(nc.constant(x), p)
            return (
                nc.mean(nc.mul(h, h)),
                nc.sum(nc.sigmoid(h)),
                nc.neg(nc.mean(nc.tanh(h))),
            )

        with nc.tape():
            ls = losses()
            total = nc.add(
                nc.add(nc.mul(weights[0], ls[0]), nc.mul(weights[1], ls[1])),
                nc.mul(weights[2], ls[2]),
            )
            nc.backward(total)
        combined = p.grad.copy()

        accum = np.zeros_like(p.values)
        for w, i in zip(weights, range(3)):
            p.zero_grad()
            with nc.tape():
                nc.backward(losses()[i])
            accum += w * p.grad
        np.testing.assert_allclose(combined, accum, atol=1e-10)


class TestPrimitiveGradients:
    """Finite-difference checks covering every differentiable primitive."""

    @pytest.mark.parametrize(
        "name",
        [
            "broadcast_arith",
            "batched_matmul",
            "gather_with_duplicates",
            "take_and_concat",
            "reshape_swapaxes",
            "activations",
            "reductions",
            "layer_norm",
            "standardize",
            "log_softmax",
        ],
    )
    def test_primitive(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        p = nc.Param("p", rng.normal(scale=0.8, size=(4, 6)))

        builders = {
            "broadcast_arith": lambda: nc.mean(
                nc.div(nc.sub(nc.mul(p, [2.0]), nc.add(p, 0.5)), nc.add(nc.mul(p, p), 2.0))
            ),
            "batched_matmul": lambda: nc.sum(
                nc.matmul(nc.reshape(p, (2, 2, 6)), nc.reshape(nc.tanh(p), (2, 6, 2)))
            ),
            "gather_with_duplicates": lambda: nc.mean(
                nc.mul(nc.gather(p, [0, 2, 2, 1, 0]), nc.gather(p, [1, 1, 3, 0, 2]))
            ),
            "take_and_concat": lambda: nc.sum(
                nc.mul(
                    nc.concat([nc.take(p, (slice(None), slice(0, 3))), nc.take(p, (slice(None), slice(3, 6)))], axis=1),
                    p,
                )
            ),
            "reshape_swapaxes": lambda: nc.sum(
                nc.tanh(nc.swapaxes(nc.reshape(p, (2, 2, 6)), 0, 2))
            ),
            "activations": lambda: nc.mean(
                nc.add(
                    nc.add(nc.sigmoid(p), nc.tanh(p)),
                    nc.add(nc.relu(p), nc.add(nc.softplus(p), nc.exp(nc.mul(p, 0.1)))),
                )
            ),
            "reductions": lambda: nc.sum(
                nc.mul(nc.mean(p, axis=0, keepdims=True), nc.sum(p, axis=1, keepdims=True))
            ),
            "layer_norm": lambda: nc.mean(
                nc.mul(nc.layer_norm(p, nc.constant(np.linspace(0.5, 1.5, 6)), nc.constant(np.zeros(6))), p)
            ),
            "standardize": lambda: nc.mean(nc.mul(nc.standardize(p, axis=0), nc.sigmoid(p))),
            "log_softmax": lambda: nc.neg(nc.mean(nc.log_softmax(p, axis=-1))),
        }
        report = nc.grad_check(builders[name], [p], step=1e-5, tol=1e-4)
        assert report.passed, (name, report.failures())

    def test_log_sqrt_gradients_on_positive_values(self):
        rng = np.random.default_rng(11)
        p = nc.Param("p", rng.uniform(0.5, 2.0, size=(3, 4)))
        report = nc.grad_check(
            lambda: nc.sum(nc.add(nc.log(p), nc.sqrt(p))), [p], step=1e-6, tol=1e-4
        )
        assert report.passed, report.failures()

    def test_layer_norm_gain_bias_gradients(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(5, 6))
        gain = nc.Param("gain", rng.uniform(0.5, 1.5, size=6))
        bias = nc.Param("bias", rng.normal(scale=0.2, size=6))
        report = nc.grad_check(
            lambda: nc.mean(nc.mul(nc.layer_norm(nc.constant(x), gain, bias), x)),
            [gain, bias],
        )
        assert report.passed, report.failures()


class TestStandardize:
    def test_unit_moments(self):
        rng = np.random.default_rng(5)
        z = nc.standardize(nc.constant(rng.normal(loc=3.0, scale=2.5, size=(64, 4)))).values
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose((z * z).mean(axis=0), 1.0, atol=1e-12)

    def test_floor_flag_counted(self):
        nc.reset_flags()
        x = np.ones((8, 3))
        x[:, 2] = np.arange(8)
        nc.standardize(nc.constant(x))
        assert nc.FLAGS["std_floor_hits"] == 2
        nc.reset_flags()


class TestAdamW:
    def test_zero_gradient_zero_decay_leaves_params(self):
        p = nc.Param("p", [1.0, -2.0])
        before = p.values.copy()
        nc.adamw_step(nc.OptimizerState(lr=0.1, weight_decay=0.0), [p])
        np.testing.assert_array_equal(p.values, before)

    def test_descent_direction_on_square(self):
        w = nc.Param("w", [1.0])
        with nc.tape():
            nc.backward(nc.sum(nc.mul(w, w)))
        nc.adamw_step(nc.OptimizerState(lr=0.1, weight_decay=0.0), [w])
        assert w.values[0] < 1.0

    def test_converges_to_quadratic_minimizer(self):
        # f(w) = 0.5 (w - 3)^2 has the closed-form minimizer w* = 3
        w = nc.Param("w", [0.0])
        state = nc.OptimizerState(lr=0.1, weight_decay=0.0)
        for _ in range(200):
            with nc.tape():
                d = nc.sub(w, 3.0)
                nc.backward(nc.mul(0.5, nc.sum(nc.mul(d, d))))
            nc.adamw_step(state, [w])
        assert abs(w.values[0] - 3.0) < 1e-3

    def test_decoupled_weight_decay_shrinks_without_gradient(self):
        p = nc.Param("p", [4.0])
        nc.adamw_step(nc.OptimizerState(lr=0.1, weight_decay=0.5), [p])
        np.testing.assert_allclose(p.values, [4.0 * (1 - 0.1 * 0.5)])

    def test_non_finite_gradient_aborts_with_name(self):
        p = nc.Param("bad_param", [1.0])
        p.grad = np.array([np.nan])
        with pytest.raises(nc.NumericsError, match="bad_param"):
            nc.adamw_step(nc.OptimizerState(lr=0.1), [p])

    def test_grads_zeroed_after_step(self):
        p = nc.Param("p", [1.0])
        p.grad = np.array([2.0])
        nc.adamw_step(nc.OptimizerState(lr=0.01), [p])
        np.testing.assert_array_equal(p.grad, [0.0])

    def test_step_counter_increases(self):
        p = nc.Param("p", [1.0])
        state = nc.OptimizerState(lr=0.01)
        for expected in (1, 2, 3):
            p.grad = np.array([1.0])
            nc.adamw_step(state, [p])
            assert state.step_count == expected


class TestClipGlobalNorm:
    def test_large_gradients_scaled_to_max_norm(self):
        a = nc.Param("a", np.zeros(3))
        b = nc.Param("b", np.zeros(4))
        a.grad = np.full(3, 3.0)
        b.grad = np.full(4, 4.0)
        norm = nc.clip_global_norm([a, b], max_norm=5.0)
        clipped = np.sqrt((a.grad**2).sum() + (b.grad**2).sum())
        assert norm > 5.0
        np.testing.assert_allclose(clipped, 5.0, rtol=1e-12)

    def test_small_gradients_untouched(self):
        a = nc.Param("a", np.zeros(2))
        a.grad = np.array([0.1, 0.2])
        nc.clip_global_norm([a], max_norm=5.0)
        np.testing.assert_array_equal(a.grad, [0.1, 0.2])

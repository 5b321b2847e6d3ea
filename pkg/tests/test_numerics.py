import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from d2s.numerics import (
    AdamState,
    NumericalError,
    adam_step,
    cosine_lr,
    derive_seed,
    grad_check,
    init_weight,
    l2_normalize,
    l2_normalize_backward,
    linear_apply,
    linear_backward,
    make_rng,
    sigmoid,
    softmax,
)
from oracles import central_difference, softmax_mp

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)

    def test_constant_shift(self):
        np.testing.assert_allclose(softmax([7.5] * 4), [0.25] * 4, atol=1e-15)

    def test_large_logit_no_overflow(self):
        p = softmax([1000.0, 0.0])
        ref = softmax_mp([1000.0, 0.0])
        assert np.all(np.isfinite(p))
        assert abs(p[0] - float(ref[0])) < 1e-15
        assert abs(p[1] - float(ref[1])) < 1e-300

    def test_errors(self):
        with pytest.raises(ValueError, match="empty vector"):
            softmax([])
        with pytest.raises(ValueError, match="non-finite input"):
            softmax([1.0, np.nan])
        with pytest.raises(ValueError, match="non-finite input"):
            softmax([np.inf, 0.0])

    @given(arrays(np.float64, st.integers(1, 20), elements=finite), finite)
    def test_sums_to_one_and_shift_invariant(self, v, c):
        p = softmax(v)
        assert abs(p.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(softmax(v + c), p, atol=1e-12)

    def test_matches_high_precision(self):
        rng = make_rng(1, "test", "softmax")
        for _ in range(20):
            v = rng.normal(size=7) * 5
            np.testing.assert_allclose(softmax(v), [float(x) for x in softmax_mp(v)], rtol=1e-13)


class TestL2Normalize:
    def test_examples(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)
        np.testing.assert_allclose(l2_normalize([-2.0, 0.0]), [-1.0, 0.0])
        u = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(l2_normalize(u), u)

    def test_zero(self):
        with pytest.raises(ValueError, match="zero-norm vector"):
            l2_normalize([0.0, 0.0])

    @given(arrays(np.float64, st.integers(1, 10), elements=finite))
    def test_unit_norm(self, v):
        if np.linalg.norm(v) < 1e-6:
            return
        assert abs(np.linalg.norm(l2_normalize(v)) - 1.0) < 1e-12

    def test_backward(self):
        rng = make_rng(2, "test", "l2")
        v, g = rng.normal(size=5), rng.normal(size=5)
        fd = central_difference(lambda x: float(np.dot(l2_normalize(np.array(x)), g)), list(v))
        np.testing.assert_allclose(l2_normalize_backward(v, g), fd, rtol=1e-7, atol=1e-10)


class TestLinear:
    def test_identity_and_bias(self):
        x = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(linear_apply(x, np.eye(3), np.zeros(3)), x)
        b0 = np.array([0.5, -1.0])
        np.testing.assert_array_equal(linear_apply(np.zeros(3), np.ones((2, 3)), b0), b0)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)|\(4,\).*\(2, 3\)"):
            linear_apply(np.zeros(4), np.zeros((2, 3)))

    def test_gradients(self):
        rng = make_rng(3, "test", "linear")
        for _ in range(100):
            n_in, n_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            x, W, b = rng.normal(size=(2, n_in)), rng.normal(size=(n_out, n_in)), rng.normal(size=n_out)
            g = rng.normal(size=(2, n_out))

            def loss(p):
                out = linear_apply(p["x"], p["W"], p["b"])
                dW, db, dx = linear_backward(p["x"], p["W"], g)
                return float(np.sum(out * g)), {"x": dx, "W": dW, "b": db}

            res = grad_check(loss, {"x": x, "W": W, "b": b})
            assert res.passed(1e-6), res


class TestAdam:
    def test_zero_grad_is_identity(self):
        p = {"w": np.array([1.0, -2.0])}
        new, st_ = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), 1e-3, weight_decay=0.0)
        np.testing.assert_array_equal(new["w"], p["w"])
        assert st_.step_count == 1

    def test_first_step_is_signed_lr(self):
        p = {"w": np.array([0.3])}
        for g in (2.5, -0.01):
            new, _ = adam_step(p, {"w": np.array([g])}, AdamState.zeros_like(p), 1e-3, eps=0.0)
            assert abs((new["w"][0] - 0.3) - (-1e-3 * math.copysign(1, g))) < 1e-15

    def test_decoupled_weight_decay(self):
        p = {"w": np.array([2.0])}
        new, _ = adam_step(p, {"w": np.zeros(1)}, AdamState.zeros_like(p), 0.1, weight_decay=0.5)
        assert new["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-15)

    def test_non_finite_gradient_preserves_state(self):
        p = {"w": np.array([1.0])}
        state = AdamState.zeros_like(p)
        with pytest.raises(NumericalError, match="non-finite gradient"):
            adam_step(p, {"w": np.array([np.nan])}, state, 1e-3)
        assert state.step_count == 0
        assert p["w"][0] == 1.0

    def test_deterministic(self):
        rng = make_rng(4, "test", "adam")
        p = {"w": rng.normal(size=(3, 2))}
        g = {"w": rng.normal(size=(3, 2))}
        a = adam_step(p, g, AdamState.zeros_like(p), 1e-3, weight_decay=1e-3)
        b = adam_step(p, g, AdamState.zeros_like(p), 1e-3, weight_decay=1e-3)
        np.testing.assert_array_equal(a[0]["w"], b[0]["w"])
        np.testing.assert_array_equal(a[1].second_moment["w"], b[1].second_moment["w"])


class TestCosineLR:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 1e-3, 2.5e-6) == 1e-3
        assert cosine_lr(100, 100, 1e-3, 2.5e-6) == 2.5e-6
        assert cosine_lr(50, 100, 1e-3, 2.5e-6) == pytest.approx((1e-3 + 2.5e-6) / 2, abs=1e-18)

    def test_beyond_horizon(self):
        with pytest.raises(ValueError, match="step beyond horizon"):
            cosine_lr(101, 100, 1e-3, 0.0)

    @given(st.integers(1, 500), st.floats(1e-6, 1.0), st.floats(0.0, 1.0))
    def test_monotone_bounded(self, T, lr0, frac):
        lr_min = lr0 * frac
        lrs = [cosine_lr(t, T, lr0, lr_min) for t in range(T + 1)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert all(lr_min - 1e-18 <= x <= lr0 + 1e-18 for x in lrs)


class TestSeeding:
    def test_streams_identical(self):
        a = make_rng(42, "init", "vision").random(10**6)
        b = make_rng(42, "init", "vision").random(10**6)
        assert np.array_equal(a, b)

    def test_purposes_differ(self):
        assert make_rng(42, "init").random() != make_rng(42, "order").random()
        assert derive_seed(42, "a") != derive_seed(42, "b")
        assert derive_seed(42, "a") == derive_seed(42, "a")

    def test_init_weight_scale(self):
        W = init_weight(make_rng(0, "w"), 400, 100)
        assert W.shape == (400, 100)
        assert abs(W.var() - 1 / 100) < 1e-3


class TestGradCheck:
    def test_square(self):
        res = grad_check(lambda p: (float(p["x"][0] ** 2), {"x": 2 * p["x"]}), {"x": np.array([3.0])})
        assert res.max_rel_error < 1e-8

    def test_norm_squared(self):
        x = make_rng(5, "gc").normal(size=6)
        res = grad_check(lambda p: (float(np.sum(p["x"] ** 2)), {"x": 2 * p["x"]}), {"x": x})
        assert res.max_rel_error < 1e-8

    def test_wrong_gradient_detected(self):
        res = grad_check(lambda p: (float(np.sum(p["x"] ** 2)), {"x": 3 * p["x"]}), {"x": np.ones(2)})
        assert not res.passed(1e-4)
        assert res.worst_param == "x"

    def test_nan_reported_with_index(self):
        def f(p):
            return float(np.sum(p["x"])), {"x": np.array([1.0, np.nan])}
        res = grad_check(f, {"x": np.zeros(2)})
        assert res.failures == [("x", (1,))]
        assert not res.ok

    def test_sigmoid_bounds(self):
        y = sigmoid(np.array([-800.0, 0.0, 800.0]))
        assert y[1] == 0.5 and 0.0 <= y[0] < 1e-300 and y[2] == 1.0

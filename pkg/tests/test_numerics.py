from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ratplus.numerics import (NumericError, RopeParams, Rng, finite_diff_grad, matmul, relative_error, rms_norm,
                              rms_norm_backward, rope_apply, sigmoid, softmax_stable)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_hand_arithmetic(self):
        assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11.0]]

    def test_matches_triple_loop(self, rng):
        a, b = rng.normal((5, 7)), rng.normal((7, 3))
        ref = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(7):
                    ref[i, j] += a[i, k] * b[k, j]
        assert np.abs(matmul(a, b) - ref).max() <= 1e-12

    def test_associativity(self, rng):
        a, b, c = rng.normal((4, 5)), rng.normal((5, 6)), rng.normal((6, 3))
        assert np.abs(matmul(matmul(a, b), c) - matmul(a, matmul(b, c))).max() <= 1e-9

    @pytest.mark.parametrize("shapes", [((2, 3), (2, 3)), ((3,), (3, 1)), ((2, 2, 2), (2, 2))])
    def test_shape_mismatch(self, shapes):
        with pytest.raises(ValueError):
            matmul(np.ones(shapes[0]), np.ones(shapes[1]))

    def test_non_finite_output(self):
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            matmul([[1e308, 1e308]], [[1e308], [1e308]])


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax_stable([0.0, 0.0, 0.0]), 1 / 3, atol=1e-15)

    @pytest.mark.parametrize("c", [-1e6, 0.0, 3.5, 700.0])
    def test_single_element(self, c):
        assert softmax_stable([c]).tolist() == [1.0]

    def test_against_exact_rationals(self):
        # e^k as high-precision rationals via math.fsum of the series is overkill; use Fraction of exp
        vals = [Fraction(math.exp(k)) for k in (1, 2, 3)]
        total = sum(vals)
        exact = [float(v / total) for v in vals]
        assert np.abs(softmax_stable([1.0, 2.0, 3.0]) - exact).max() <= 1e-14

    def test_large_logits_do_not_overflow(self):
        p = softmax_stable([1000.0, 1000.0])
        assert np.allclose(p, 0.5)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            softmax_stable([])

    def test_nan_raises(self):
        with pytest.raises(NumericError):
            softmax_stable([0.0, np.nan])

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.floats(-50, 50))
    def test_shift_invariance(self, xs, c):
        x = np.array(xs)
        assert np.abs(softmax_stable(x + c) - softmax_stable(x)).max() <= 1e-12


class TestSigmoid:
    def test_extremes_are_finite(self):
        s = sigmoid(np.array([-800.0, 0.0, 800.0]))
        assert s.tolist() == [0.0, 0.5, 1.0]

    def test_matches_scalar_formula(self, rng):
        x = rng.normal(50) * 5
        ref = np.array([1 / (1 + math.exp(-v)) for v in x])
        assert np.abs(sigmoid(x) - ref).max() <= 1e-14


class TestRmsNorm:
    def test_unit_rms_input(self):
        assert np.allclose(rms_norm(np.ones(4), np.ones(4), eps=1e-12), 1.0)

    def test_zero_vector(self):
        assert np.array_equal(rms_norm(np.zeros(5), np.ones(5)), np.zeros(5))

    def test_output_has_unit_rms(self, rng):
        x, w = rng.normal(16), rng.uniform(16, 0.5, 2.0)
        y = rms_norm(x, w, eps=1e-12)
        assert abs(np.sqrt(np.mean((y / w) ** 2)) - 1.0) <= 1e-6

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rms_norm(np.ones(3), np.ones(4))

    def test_backward_matches_finite_diff(self, rng):
        x, w, gy = rng.normal((3, 6)), rng.normal(6), rng.normal((3, 6))
        gx, gw = rms_norm_backward(gy, x, w)
        nx = finite_diff_grad(lambda a: float((rms_norm(a, w) * gy).sum()), x)
        nw = finite_diff_grad(lambda a: float((rms_norm(x, a) * gy).sum()), w)
        assert relative_error(gx, nx).max() <= 1e-6
        assert relative_error(gw, nw).max() <= 1e-6


class TestRope:
    def test_position_zero_is_identity(self, rng):
        x = rng.normal((1, 8))
        assert np.allclose(rope_apply(x, [0], RopeParams(8)), x, atol=0)

    def test_disabled_returns_input(self, rng):
        x = rng.normal((3, 8))
        assert rope_apply(x, [5, 6, 7], RopeParams(8, enabled=False)) is x

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ValueError):
            RopeParams(7)
        with pytest.raises(ValueError):
            rope_apply(np.ones((1, 3)), [0], RopeParams(4))

    def test_inverse_round_trip(self, rng):
        x = rng.normal((5, 2, 8))
        pos = np.arange(5) * 3
        y = rope_apply(rope_apply(x, pos, RopeParams(8)), pos, RopeParams(8), inverse=True)
        assert np.abs(y - x).max() <= 1e-12

    def test_positions_on_other_axis(self, rng):
        x = rng.normal((2, 5, 8))
        pos = np.arange(5)
        a = rope_apply(x, pos, RopeParams(8), axis=1)
        b = np.stack([rope_apply(x[i], pos, RopeParams(8)) for i in range(2)])
        assert np.abs(a - b).max() <= 1e-15

    @given(st.integers(0, 5000), st.integers(0, 5000), st.integers(-2000, 2000), st.integers(0, 2 ** 16))
    def test_relative_position_property(self, p1, p2, s, seed):
        r = Rng(seed)
        q, k = r.normal((1, 16)), r.normal((1, 16))
        rp = RopeParams(16)
        s = max(s, -min(p1, p2))
        a = float(rope_apply(q, [p1], rp)[0] @ rope_apply(k, [p2], rp)[0])
        b = float(rope_apply(q, [p1 + s], rp)[0] @ rope_apply(k, [p2 + s], rp)[0])
        assert abs(a - b) <= 1e-10

    @given(st.integers(0, 10 ** 6), st.integers(0, 2 ** 16))
    def test_pairwise_norm_preserved(self, p, seed):
        x = Rng(seed).normal((1, 8))
        y = rope_apply(x, [p], RopeParams(8))
        nx = np.hypot(x[0, 0::2], x[0, 1::2])
        ny = np.hypot(y[0, 0::2], y[0, 1::2])
        assert np.abs(nx - ny).max() <= 1e-10


class TestFiniteDiff:
    def test_square(self):
        g = finite_diff_grad(lambda x: float((x ** 2).sum()), np.array([1.0, 2.0]))
        assert np.abs(g - [2.0, 4.0]).max() <= 1e-8

    def test_constant(self):
        assert np.array_equal(finite_diff_grad(lambda x: 3.0, np.ones(3)), np.zeros(3))

    def test_softmax_jacobian(self):
        g = finite_diff_grad(lambda x: float(softmax_stable(x)[0]), np.zeros(2))
        assert np.abs(g - [0.25, -0.25]).max() <= 1e-7

    def test_restores_input(self, rng):
        x = rng.normal(4)
        before = x.copy()
        finite_diff_grad(lambda a: float(a.sum()), x)
        assert np.array_equal(x, before)

    def test_non_finite_function_raises(self):
        with pytest.raises(NumericError):
            finite_diff_grad(lambda x: float("nan"), np.ones(2))

    def test_relative_error_floor(self):
        assert relative_error(0.0, 1e-9) < 1e-2
        assert relative_error(1.0, 2.0) == pytest.approx(0.5)


class TestRng:
    def test_equal_seeds_equal_streams(self):
        a, b = Rng(99), Rng(99)
        assert np.array_equal(a.normal(10_000), b.normal(10_000))

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).normal(10), Rng(2).normal(10))

    def test_spawn_is_deterministic(self):
        assert np.array_equal(Rng(5).spawn(3).normal(4), Rng(5).spawn(3).normal(4))

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lacl.errors import DegenerateVectorError, DivergenceUndefinedError, InvalidInputError
from lacl.mathutils import finite_diff_gradient, kl_divergence, l2_normalize, softmax

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestSoftmax:
    def test_symmetric(self):
        assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=0, rtol=0)

    def test_closed_form(self):
        out = softmax([math.log(2), 0.0])
        assert out == pytest.approx([2 / 3, 1 / 3], abs=1e-15)

    def test_matches_high_precision(self, rng):
        v = rng.standard_normal(7) * 3
        mpmath.mp.dps = 40
        e = [mpmath.exp(mpmath.mpf(float(x))) for x in v]
        total = mpmath.fsum(e)
        oracle = np.array([float(x / total) for x in e])
        assert np.max(np.abs(softmax(v) - oracle)) <= 1e-14

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            softmax([0.0, np.nan])
        with pytest.raises(InvalidInputError):
            softmax([np.inf, 0.0])

    @given(arrays(np.float64, st.integers(1, 30), elements=finite), st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, v, c):
        p = softmax(v)
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all((p >= 0) & (p <= 1))
        assert np.max(np.abs(softmax(v + c) - p)) <= 1e-12


class TestL2Normalize:
    def test_345(self):
        assert l2_normalize([3.0, 4.0]) == pytest.approx([0.6, 0.8], abs=1e-15)

    def test_unit_is_fixed_point(self, rng):
        u = rng.standard_normal(9)
        u /= np.linalg.norm(u)
        assert np.max(np.abs(l2_normalize(u) - u)) <= 1e-12

    def test_degenerate(self):
        with pytest.raises(DegenerateVectorError):
            l2_normalize([0.0, 0.0])

    def test_rows(self, rng):
        out = l2_normalize(rng.standard_normal((5, 3)))
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)),
           st.floats(1e-3, 1e3))
    def test_idempotent_and_scale_invariant(self, v, a):
        if np.linalg.norm(v) < 1e-6:
            return
        u = l2_normalize(v)
        assert abs(np.linalg.norm(u) - 1) <= 1e-10
        assert np.max(np.abs(l2_normalize(u) - u)) <= 1e-10
        assert np.max(np.abs(l2_normalize(a * v) - u)) <= 1e-10


class TestKL:
    def test_identity(self):
        assert kl_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0

    def test_point_mass_vs_uniform(self):
        assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)

    def test_matches_term_sum(self, rng):
        for _ in range(50):
            n = rng.integers(2, 12)
            p = rng.random(n); p /= p.sum()
            q = rng.random(n); q /= q.sum()
            oracle = math.fsum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
            assert kl_divergence(p, q) == pytest.approx(oracle, abs=1e-12)

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            kl_divergence([0.5, 0.5], [1.0])
        with pytest.raises(DivergenceUndefinedError):
            kl_divergence([0.5, 0.5], [1.0, 0.0])

    @settings(max_examples=200)
    @given(arrays(np.float64, 6, elements=st.floats(0, 1)), arrays(np.float64, 6, elements=st.floats(1e-3, 1)))
    def test_gibbs(self, p, q):
        if p.sum() == 0:
            return
        assert kl_divergence(p / p.sum(), q / q.sum()) >= 0.0


class TestFiniteDiff:
    def test_quadratic(self):
        g = finite_diff_gradient(lambda x: float(x @ x), [3.0], 1e-5)
        assert g[0] == pytest.approx(6.0, abs=1e-8)

    def test_linear(self, rng):
        w = rng.standard_normal(5)
        g = finite_diff_gradient(lambda x: float(w @ x), rng.standard_normal(5), 1e-5)
        assert np.allclose(g, w, atol=1e-9)

    def test_rejects_bad_step(self):
        with pytest.raises(InvalidInputError):
            finite_diff_gradient(lambda x: 0.0, [1.0], 0.0)

    def test_non_finite_propagates(self):
        with pytest.raises(InvalidInputError):
            finite_diff_gradient(lambda x: float("nan"), [1.0])

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dicosa import numkit
from dicosa.errors import BatchSizeError, NumericalError, ParameterError, ShapeError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestSoftmax:
    @pytest.mark.parametrize("c", [-3.0, 0.0, 7.5])
    @pytest.mark.parametrize("tau", [0.1, 1.0, 40.0])
    def test_equal_logits_are_uniform(self, c, tau):
        np.testing.assert_allclose(numkit.softmax([c, c, c], tau), [1 / 3] * 3, atol=1e-15)

    def test_two_logits_closed_form(self):
        e = math.e
        np.testing.assert_allclose(numkit.softmax([1.0, 0.0], 1.0), [e / (1 + e), 1 / (1 + e)], rtol=1e-14)
        np.testing.assert_allclose(numkit.softmax([1.0, 0.0], 1.0), [0.7310585786300049, 0.2689414213699951], atol=1e-15)

    def test_high_temperature_limit(self):
        np.testing.assert_allclose(numkit.softmax([1.0, 0.0], 1e9), [0.5, 0.5], atol=1e-9)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_nonpositive_temperature(self, tau):
        with pytest.raises(ParameterError):
            numkit.softmax([1.0, 2.0], tau)

    def test_empty(self):
        with pytest.raises(ShapeError):
            numkit.softmax([], 1.0)

    def test_large_logits_stay_finite(self):
        out = numkit.softmax([1000.0, 999.0, -1000.0], 1.0)
        assert np.all(np.isfinite(out))
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    @given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(0.05, 20), finite)
    def test_shift_invariance_and_simplex(self, x, tau, c):
        p = numkit.softmax(x, tau)
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all(p >= 0) and np.all(p <= 1)
        np.testing.assert_allclose(numkit.softmax(x + c, tau), p, atol=1e-12)


class TestBatchStandardize:
    def test_two_point_column(self):
        np.testing.assert_allclose(numkit.batch_standardize([[1.0], [3.0]]), [[-1.0], [1.0]], atol=1e-8)

    def test_constant_column(self):
        np.testing.assert_array_equal(numkit.batch_standardize([[5.0], [5.0], [5.0]]), np.zeros((3, 1)))

    def test_three_point_column(self):
        z = numkit.batch_standardize([[0.0], [1.0], [2.0]])
        r = 1 / math.sqrt(2 / 3)
        np.testing.assert_allclose(z[:, 0], [-r, 0.0, r], atol=1e-8)
        assert z[2, 0] == pytest.approx(1.2247448713915890, abs=1e-8)

    def test_batch_of_one(self):
        with pytest.raises(BatchSizeError):
            numkit.batch_standardize([[1.0, 2.0]])

    def test_restandardize_unit_variance_column(self):
        Z = numkit.batch_standardize([[0.0], [1.0], [2.0]])
        np.testing.assert_allclose(numkit.batch_standardize(Z), Z, atol=1e-8)

    @settings(max_examples=50)
    @given(arrays(np.float64, st.tuples(st.integers(2, 9), st.integers(1, 5)), elements=finite))
    def test_moments_and_idempotence(self, X):
        Z = numkit.batch_standardize(X)
        np.testing.assert_allclose(Z.mean(axis=0), 0.0, atol=1e-10)
        v = X.var(axis=0)
        big = v > 1e-4
        np.testing.assert_allclose(Z.std(axis=0)[big], 1.0, atol=1e-4)
        Z2 = numkit.batch_standardize(Z)
        # the epsilon guard makes a second pass rescale by 1 + eps/2 * (1/v - 1) to first order
        bound = 0.5 * numkit.STD_EPS * np.abs(1 / v[big] - 1) * np.abs(Z[:, big]) * 1.01 + 1e-12
        assert np.all(np.abs(Z2[:, big] - Z[:, big]) <= bound)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((5, 3))
        W = rng.standard_normal((5, 3))

        def fun(p):
            Z, c, s = numkit.standardize_forward(p["X"])
            return float(np.sum(W * Z)), {"X": numkit.standardize_backward(W, c, s)}

        assert numkit.grad_check(fun, {"X": X}).passed(1e-7)


class TestCosine:
    def test_self(self):
        assert numkit.cosine([0.3, -2.0, 5.0], [0.3, -2.0, 5.0]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert numkit.cosine([1.0, 0.0], [0.0, 4.0]) == 0.0

    def test_closed_form(self):
        assert numkit.cosine([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)

    def test_zero_norm_is_zero(self):
        assert numkit.cosine([0.0, 0.0], [1.0, 2.0]) == 0.0
        assert numkit.cosine([1e-13, 0.0], [1.0, 2.0]) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            numkit.cosine([1.0, 2.0], [1.0, 2.0, 3.0])

    @given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite),
           st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_scale_invariance_and_range(self, a, b, lam, mu):
        c = numkit.cosine(a, b)
        assert -1.0 <= c <= 1.0
        if np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6:
            assert numkit.cosine(lam * a, mu * b) == pytest.approx(c, abs=1e-12)


class TestGradCheck:
    def test_quadratic(self):
        rep = numkit.grad_check(lambda p: (0.5 * float(p["x"] @ p["x"]), {"x": p["x"].copy()}),
                                {"x": np.array([3.0, 4.0])})
        assert rep.max_rel_error < 1e-9
        assert set(rep.per_block) == {"x"}

    def test_reports_every_block(self):
        def fun(p):
            return float(np.sum(p["a"] ** 2) + np.sum(np.sin(p["b"]))), {"a": 2 * p["a"], "b": np.cos(p["b"])}

        rep = numkit.grad_check(fun, {"a": np.ones((2, 2)), "b": np.arange(3.0)})
        assert set(rep.per_block) == {"a", "b"}
        assert rep.passed(1e-8)

    def test_detects_wrong_gradient(self):
        rep = numkit.grad_check(lambda p: (float(np.sum(p["x"] ** 3)), {"x": 2 * p["x"]}), {"x": np.array([1.0, 2.0])})
        assert not rep.passed()

    def test_non_finite_probe_names_block(self):
        def fun(p):
            with np.errstate(invalid="ignore"):
                v = float(np.log(p["w"][0]))
            return v, {"w": np.array([1 / p["w"][0]])}

        with pytest.raises(NumericalError, match="'w'"):
            numkit.grad_check(fun, {"w": np.array([1e-6])}, h=1e-5)

    def test_relative_error_floor(self):
        assert numkit.relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
        assert numkit.relative_error(np.array([1.0]), np.array([3.0]))[0] == pytest.approx(0.5)

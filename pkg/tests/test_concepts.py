import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dicosa import concepts, numkit
from dicosa.errors import BatchSizeError, ConfigError, DomainError, ShapeError


def correlated_pair(rho, B, d, rng):
    x = rng.standard_normal((B, 1, d))
    y = rho * x + math.sqrt(1 - rho * rho) * rng.standard_normal((B, 1, d))
    return x, y


class TestProjection:
    def test_identity_single_factor(self):
        x = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(concepts.project_factors(x, np.eye(3), 1), x[None, :])

    def test_coordinate_selection(self):
        W = np.eye(4)
        np.testing.assert_array_equal(concepts.project_factors([1.0, 2.0, 3.0, 4.0], W, 2), [[1.0, 2.0], [3.0, 4.0]])

    def test_d512_k8_shape(self):
        W = concepts.init_projection(512, 8, np.random.default_rng(0))
        assert concepts.project_factors(np.ones(512), W, 8).shape == (8, 64)

    def test_k_must_divide_d(self):
        with pytest.raises(ConfigError):
            concepts.check_k(10, 4)
        with pytest.raises(ShapeError):
            concepts.project_factors(np.ones(3), np.eye(4), 2)

    @pytest.mark.parametrize("orth", [True, False])
    def test_init_scale(self, orth):
        W = concepts.init_projection(256, 8, np.random.default_rng(1), orthogonal=orth)
        assert abs(W.mean()) < 3e-3
        assert W.std() == pytest.approx(1 / 16, rel=0.02)
        if orth:
            np.testing.assert_allclose(W @ W.T, np.eye(256), atol=1e-12)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(2)
        W = rng.standard_normal((6, 6))
        X = rng.standard_normal((3, 6))
        out = concepts.project_batch(X, W, 3)
        for i in range(3):
            np.testing.assert_allclose(out[i], concepts.project_factors(X[i], W, 3), atol=1e-14)


class TestCovariance:
    def test_self_correlation(self):
        e = np.random.default_rng(0).standard_normal((16, 3, 5))
        np.testing.assert_allclose(np.diag(concepts.covariance(e, e)), 1.0, atol=1e-8)

    def test_independent_factors(self):
        rng = np.random.default_rng(13)
        C = concepts.covariance(rng.standard_normal((2048, 4, 8)), rng.standard_normal((2048, 4, 8)))
        assert np.all(np.abs(C) < 0.08)

    def test_correlated_pair(self):
        x, y = correlated_pair(0.9, 4096, 8, np.random.default_rng(0))
        assert concepts.covariance(x, y)[0, 0] == pytest.approx(0.9, abs=0.03)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        t, v = rng.standard_normal((7, 3, 2)), rng.standard_normal((7, 3, 2))
        C = concepts.covariance(t, v)
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for m in range(2):
                    a, b = t[:, i, m], v[:, j, m]
                    acc += np.mean((a - a.mean()) * (b - b.mean())) / math.sqrt((a.var() + 1e-8) * (b.var() + 1e-8))
                assert C[i, j] == pytest.approx(acc / 2, abs=1e-12)

    def test_batch_too_small(self):
        with pytest.raises(BatchSizeError):
            concepts.covariance(np.ones((1, 2, 2)), np.ones((1, 2, 2)))
        with pytest.raises(ShapeError):
            concepts.covariance(np.ones((3, 2, 2)), np.ones((3, 2, 3)))

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_affine_invariance_and_range(self, seed):
        rng = np.random.default_rng(seed)
        t, v = rng.standard_normal((10, 3, 4)), rng.standard_normal((10, 3, 4))
        C = concepts.covariance(t, v)
        assert np.all(np.abs(C) <= 1 + 1e-6)
        a = rng.uniform(0.1, 5.0, (3, 4))
        b = rng.standard_normal((3, 4))
        moved = a * t + b
        # exact without the epsilon guard
        np.testing.assert_allclose(concepts.covariance(moved, v, epsilon=0.0), concepts.covariance(t, v, epsilon=0.0),
                                   atol=1e-10)
        # with it, each correlation shifts by at most eps / (2 var) relative, to first order
        var = np.minimum(t.var(axis=0), moved.var(axis=0)).min()
        assert np.all(np.abs(concepts.covariance(moved, v) - C) <= numkit.STD_EPS / var + 1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        t0, v0 = rng.standard_normal((5, 2, 3)), rng.standard_normal((5, 2, 3))
        G = rng.standard_normal((2, 2))

        def fun(p):
            C, cache = concepts.covariance_forward(p["t"], p["v"])
            dt, dv = concepts.covariance_backward(G, cache)
            return float(np.sum(G * C)), {"t": dt, "v": dv}

        assert numkit.grad_check(fun, {"t": t0, "v": v0}).passed(1e-6)


class TestLosses:
    def test_decouple_examples(self):
        assert concepts.loss_decouple(np.diag([0.3, -2.0, 1.0])) == 0.0
        assert concepts.loss_decouple([[7.0, 0.5], [0.5, -1.0]]) == pytest.approx(0.5)

    def test_decouple_brute_force(self):
        C = np.random.default_rng(3).uniform(-1, 1, (5, 5))
        ref = sum(C[i, j] ** 2 for i in range(5) for j in range(5) if i != j)
        assert concepts.loss_decouple(C) == pytest.approx(ref, abs=1e-14)

    def test_align_examples(self):
        assert concepts.loss_align(np.eye(4)) == 0.0
        assert concepts.loss_align(np.zeros((8, 8))) == 8.0

    def test_align_brute_force(self):
        C = np.diag(np.random.default_rng(5).uniform(-1, 1, 6))
        assert concepts.loss_align(C) == pytest.approx(sum((1 - C[i, i]) ** 2 for i in range(6)), abs=1e-14)

    def test_loss_grads(self):
        C = np.random.default_rng(6).uniform(-1, 1, (3, 3))
        fd = lambda f: numkit.grad_check(lambda p: (f(p["C"]), {"C": g(p["C"])}), {"C": C})  # noqa: E731
        g = concepts.loss_decouple_grad
        assert fd(concepts.loss_decouple).passed(1e-8)
        g = concepts.loss_align_grad
        assert fd(concepts.loss_align).passed(1e-8)

    def test_non_square(self):
        with pytest.raises(ShapeError):
            concepts.loss_align(np.ones((2, 3)))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(8)
        t, v = rng.standard_normal((9, 4, 3)), rng.standard_normal((9, 4, 3))
        perm = rng.permutation(4)
        C, Cp = concepts.covariance(t, v), concepts.covariance(t[:, perm], v[:, perm])
        assert concepts.loss_decouple(Cp) == pytest.approx(concepts.loss_decouple(C), abs=1e-10)
        assert concepts.loss_align(Cp) == pytest.approx(concepts.loss_align(C), abs=1e-10)


class TestGaussianMI:
    def test_examples(self):
        assert concepts.gaussian_mi_oracle(0.0) == 0.0
        assert concepts.gaussian_mi_oracle(0.9) == pytest.approx(-0.5 * math.log(0.19), rel=1e-14)
        assert concepts.gaussian_mi_oracle(0.9) == pytest.approx(0.8304, abs=5e-5)
        mi = [concepts.gaussian_mi_oracle(r) for r in (0.0, 0.3, 0.6)]
        assert mi[0] < mi[1] < mi[2]

    @pytest.mark.parametrize("rho", [1.0, -1.0, 1.5])
    def test_domain(self, rho):
        with pytest.raises(DomainError):
            concepts.gaussian_mi_oracle(rho)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dicosa import encoder
from dicosa.encoder import AggregationParams
from dicosa.errors import ParameterError, ShapeError


def test_identical_frames():
    f = np.array([0.5, -1.0, 2.0])
    for tau in (0.1, 3.0, 100.0):
        V = encoder.aggregate_video([3.0, 1.0, -2.0], np.tile(f, (4, 1)), AggregationParams(tau))
        np.testing.assert_allclose(V, f, atol=1e-15)


def test_large_tau_gives_frame_mean():
    F = np.array([[1.0, 2.0], [3.0, -1.0], [0.0, 0.5]])
    np.testing.assert_allclose(encoder.aggregate_video([1.0, 1.0], F, AggregationParams(1e9)), F.mean(axis=0), atol=1e-8)


def test_closed_form_two_frames():
    e = math.e
    w = encoder.frame_weights([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], AggregationParams(1.0))
    np.testing.assert_allclose(w, [e / (1 + e), 1 / (1 + e)], rtol=1e-14)
    V = encoder.aggregate_video([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], AggregationParams(1.0))
    np.testing.assert_allclose(V, [0.7310585786300049, 0.2689414213699951], atol=1e-15)


def test_default_temperature():
    assert AggregationParams().tau == 3.0
    with pytest.raises(ParameterError):
        AggregationParams(0.0)


def test_shape_errors():
    with pytest.raises(ShapeError):
        encoder.aggregate_video([1.0, 0.0], [[1.0, 0.0, 0.0]])
    with pytest.raises(ShapeError):
        encoder.aggregate_video([1.0, 0.0], np.zeros((0, 2)))


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.2, 10))
def test_permutation_invariance_and_convexity(seed, n, tau):
    rng = np.random.default_rng(seed)
    T = rng.standard_normal(4)
    F = rng.standard_normal((n, 4))
    p = AggregationParams(tau)
    w = encoder.frame_weights(T, F, p)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
    perm = rng.permutation(n)
    np.testing.assert_allclose(encoder.aggregate_video(T, F[perm], p), encoder.aggregate_video(T, F, p), atol=1e-12)
    V = encoder.aggregate_video(T, F, p)
    assert np.all(V <= F.max(axis=0) + 1e-12) and np.all(V >= F.min(axis=0) - 1e-12)


def test_smaller_tau_sharpens_argmax_frame():
    T = np.array([1.0, 0.5])
    F = np.array([[2.0, 0.0], [1.0, 1.0], [0.0, -1.0]])
    top = int(np.argmax(F @ T))
    ws = [encoder.frame_weights(T, F, AggregationParams(t))[top] for t in (10.0, 3.0, 1.0, 0.3)]
    assert all(a < b for a, b in zip(ws, ws[1:]))


def test_global_similarity_examples():
    assert encoder.global_similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)
    assert encoder.global_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert encoder.global_similarity([2.0, 0.0], [1.0, 1.0]) == pytest.approx(0.7071067811865476, abs=1e-15)


def test_pair_weights_match_single_pair_and_mask():
    rng = np.random.default_rng(0)
    T = rng.standard_normal((3, 4))
    F = rng.standard_normal((2, 5, 4))
    mask = np.array([[True] * 5, [True, True, False, False, False]])
    F[1, 2:] = 0.0
    V = encoder.aggregate_pairs(T, F, mask, 3.0)
    for q in range(3):
        np.testing.assert_allclose(V[q, 0], encoder.aggregate_video(T[q], F[0]), atol=1e-14)
        np.testing.assert_allclose(V[q, 1], encoder.aggregate_video(T[q], F[1, :2]), atol=1e-14)
    w = encoder.pair_weights(T, F, mask, 3.0)
    assert np.all(w[:, 1, 2:] == 0.0)

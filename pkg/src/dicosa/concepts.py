"""Factor projections, the cross-modal factor covariance and its two losses.

A projection for one modality is stored as a single ``(D, D)`` matrix whose
rows split into K consecutive blocks of ``D // K`` rows; block k is W_k.
Factor sets are ``(K, D // K)`` arrays, batches of them ``(B, K, D // K)``.
"""
from __future__ import annotations

import math

import numpy as np

from . import numkit
from .errors import BatchSizeError, ConfigError, DomainError, ShapeError


def check_k(dim: int, k: int) -> int:
    if k < 1 or dim % k != 0:
        raise ConfigError(f"K={k} must divide D={dim}")
    return dim // k


def init_projection(dim: int, k: int, rng: np.random.Generator, orthogonal: bool = True) -> np.ndarray:
    """Random projection whose entries have mean 0 and std 1/sqrt(D).

    By default the Gaussian draw is orthogonalized (Haar measure, sign-fixed
    QR); entries keep std 1/sqrt(D) but the map preserves inner products
    exactly, where a raw square Gaussian matrix is badly conditioned.
    """
    check_k(dim, k)
    G = rng.standard_normal((dim, dim))
    if not orthogonal:
        return G / math.sqrt(dim)
    Q, R = np.linalg.qr(G)
    return Q * np.sign(np.diag(R))


def project_factors(x, W: np.ndarray, k: int) -> np.ndarray:
    """Split ``W @ x`` into K factors of dimension D // K."""
    x = numkit.as_vector(x, "x")
    W = numkit.as_matrix(W, "W")
    if W.shape[1] != x.shape[0]:
        raise ShapeError(f"projection expects D={W.shape[1]}, got {x.shape[0]}")
    d = check_k(W.shape[0], k)
    return (W @ x).reshape(k, d)


def project_batch(X: np.ndarray, W: np.ndarray, k: int) -> np.ndarray:
    """``(..., D)`` inputs to ``(..., K, D // K)`` factors."""
    if X.shape[-1] != W.shape[1]:
        raise ShapeError(f"projection expects D={W.shape[1]}, got {X.shape[-1]}")
    d = check_k(W.shape[0], k)
    return (X @ W.T).reshape(*X.shape[:-1], k, d)


def _check_pair(text_factors: np.ndarray, video_factors: np.ndarray) -> None:
    if text_factors.ndim != 3 or text_factors.shape != video_factors.shape:
        raise ShapeError(f"factor batches must share shape (B, K, d): {text_factors.shape} vs {video_factors.shape}")
    if text_factors.shape[0] < 2:
        raise BatchSizeError(f"covariance needs B >= 2, got B={text_factors.shape[0]}")


def covariance_forward(text_factors: np.ndarray, video_factors: np.ndarray, epsilon: float = numkit.STD_EPS):
    """Return ``C`` plus the cache ``covariance_backward`` needs."""
    _check_pair(text_factors, video_factors)
    B, _, d = text_factors.shape
    zt, ct, st = numkit.standardize_forward(text_factors, epsilon)
    zv, cv, sv = numkit.standardize_forward(video_factors, epsilon)
    # mean per-dimension correlation between text factor i and video factor j
    C = np.einsum("bim,bjm->ij", zt, zv) / (B * d)
    return C, (zt, ct, st, zv, cv, sv)


def covariance(text_factors, video_factors, epsilon: float = numkit.STD_EPS) -> np.ndarray:
    """K x K matrix of mean per-dimension Pearson correlations over the batch."""
    tf = np.asarray(text_factors, dtype=np.float64)
    vf = np.asarray(video_factors, dtype=np.float64)
    return covariance_forward(tf, vf, epsilon)[0]


def covariance_backward(dC: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the raw text and video factor batches."""
    zt, ct, st, zv, cv, sv = cache
    B, _, d = zt.shape
    dzt = np.einsum("ij,bjm->bim", dC, zv) / (B * d)
    dzv = np.einsum("ij,bim->bjm", dC, zt) / (B * d)
    return numkit.standardize_backward(dzt, ct, st), numkit.standardize_backward(dzv, cv, sv)


def _square(C) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeError(f"covariance must be square, got {C.shape}")
    return C


def loss_decouple(C) -> float:
    """Sum of squared off-diagonal entries."""
    C = _square(C)
    off = C - np.diag(np.diag(C))
    return float(np.sum(off * off))


def loss_decouple_grad(C: np.ndarray) -> np.ndarray:
    return 2.0 * (C - np.diag(np.diag(C)))


def loss_align(C) -> float:
    """Sum of squared distances of the diagonal from 1."""
    C = _square(C)
    r = 1.0 - np.diag(C)
    return float(r @ r)


def loss_align_grad(C: np.ndarray) -> np.ndarray:
    return np.diag(-2.0 * (1.0 - np.diag(C)))


def gaussian_mi_oracle(rho: float) -> float:
    """Mutual information (nats) of a bivariate Gaussian with correlation rho."""
    if not abs(rho) < 1:
        raise DomainError(f"|rho| must be < 1, got {rho}")
    return -0.5 * math.log1p(-rho * rho)

"""Dense float64 helpers: softmax, batch standardization, cosine, grad checking.

Every function validates shapes up front and never broadcasts silently.
Arrays are plain ``numpy.ndarray`` of dtype float64; "Vector" means 1-D and
"Matrix" means 2-D row-major.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import BatchSizeError, NumericalError, ParameterError, ShapeError

STD_EPS = 1e-8
NORM_FLOOR = 1e-12


def as_vector(x, name: str = "vector") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {a.shape}")
    if a.size == 0:
        raise ShapeError(f"{name} is empty")
    return a


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size == 0:
        raise ShapeError(f"{name} is empty")
    return a


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Softmax of a vector at the given temperature, max-subtracted."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = as_vector(logits, "logits") / temperature
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


_OPEN_LO = np.finfo(np.float64).tiny
_OPEN_HI = np.nextafter(1.0, 0.0)


def sigmoid(x):
    """Logistic function, kept strictly inside (0, 1) even where float64 would round to an endpoint."""
    x = np.asarray(x, dtype=np.float64)
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _OPEN_LO, _OPEN_HI)


def batch_standardize(X, epsilon: float = STD_EPS) -> np.ndarray:
    """Standardize each column over the batch axis (population variance).

    The denominator is ``sqrt(var + epsilon)`` so constant columns map to 0.
    Accepts ``(B, ...)`` arrays; statistics are always taken over axis 0.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2:
        raise ShapeError(f"expected a batch of rows, got shape {X.shape}")
    if X.shape[0] < 2:
        raise BatchSizeError(f"batch statistics need B >= 2, got B={X.shape[0]}")
    return standardize_forward(X, epsilon)[0]


def standardize_forward(X: np.ndarray, epsilon: float = STD_EPS):
    """Return ``(Z, centered, scale)``; the latter two feed ``standardize_backward``."""
    centered = X - X.mean(axis=0)
    scale = np.sqrt((centered * centered).mean(axis=0) + epsilon)
    return centered / scale, centered, scale


def standardize_backward(dZ: np.ndarray, centered: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Gradient through standardization, including the batch mean and variance."""
    B = dZ.shape[0]
    mean_dz = dZ.mean(axis=0)
    proj = (dZ * centered).sum(axis=0) / B
    return (dZ - mean_dz) / scale - centered * proj / scale**3


def cosine(a, b) -> float:
    """Cosine similarity; 0 when either vector has norm below 1e-12."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_last_axis(a: np.ndarray, b: np.ndarray):
    """Cosine along the last axis with broadcasting of leading axes.

    Returns ``(cos, dot, norm_a, norm_b, valid)``; entries where either norm is
    under the floor are 0 and flagged invalid so backward passes skip them.
    """
    dot = np.sum(a * b, axis=-1)
    na = np.sqrt(np.sum(a * a, axis=-1))
    nb = np.sqrt(np.sum(b * b, axis=-1))
    valid = (na >= NORM_FLOOR) & (nb >= NORM_FLOOR)
    denom = np.where(valid, na * nb, 1.0)
    cos = np.where(valid, dot / denom, 0.0)
    return cos, dot, na, nb, valid


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    per_block: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol

    def __str__(self) -> str:
        blocks = ", ".join(f"{k}={v:.2e}" for k, v in self.per_block.items())
        return f"{self.name}: max rel err {self.max_rel_error:.3e} [{blocks}]"


def relative_error(g_analytic: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_analytic - g_fd) / np.maximum(1e-8, np.abs(g_analytic) + np.abs(g_fd))


def grad_check(
    fun: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    name: str = "loss",
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``fun(params)`` returns ``(loss, grads)`` with one gradient array per
    parameter block. Every entry of every block is probed.
    """
    point = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    _, analytic = fun(point)
    per_block: dict[str, float] = {}
    for key, arr in point.items():
        flat = arr.reshape(-1)
        fd = np.empty_like(flat)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            plus = float(fun(point)[0])
            flat[idx] = orig - h
            minus = float(fun(point)[0])
            flat[idx] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericalError(f"non-finite loss while probing block {key!r} at entry {idx}")
            fd[idx] = (plus - minus) / (2.0 * h)
        ga = np.asarray(analytic[key], dtype=np.float64).reshape(-1)
        if ga.shape != fd.shape:
            raise ShapeError(f"gradient for block {key!r} has shape {ga.shape}, expected {fd.shape}")
        per_block[key] = float(relative_error(ga, fd).max())
    return GradCheckReport(name=name, max_rel_error=max(per_block.values()), per_block=per_block)

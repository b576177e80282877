"""Text-conditioned frame pooling and the whole-vector cosine baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .errors import ParameterError, ShapeError

DEFAULT_TAU = 3.0


@dataclass(frozen=True)
class AggregationParams:
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")


def frame_weights(T, F, params: AggregationParams = AggregationParams()) -> np.ndarray:
    """Softmax over frames of ``T . f_i / tau``."""
    T = numkit.as_vector(T, "T")
    F = numkit.as_matrix(F, "F")
    if F.shape[1] != T.shape[0]:
        raise ShapeError(f"frame dim {F.shape[1]} does not match text dim {T.shape[0]}")
    return numkit.softmax(F @ T, params.tau)


def aggregate_video(T, F, params: AggregationParams = AggregationParams()) -> np.ndarray:
    """Convex combination of frame rows weighted by their affinity to the text."""
    a = frame_weights(T, F, params)
    return a @ np.asarray(F, dtype=np.float64)


def pair_weights(T: np.ndarray, F: np.ndarray, frame_mask: np.ndarray | None, tau: float) -> np.ndarray:
    """Frame weights for every (text, video) pair.

    ``T`` is ``(Q, D)``, ``F`` is ``(C, N, D)`` and the result is ``(Q, C, N)``.
    Padded frames (mask False) get weight exactly 0.
    """
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    if F.ndim != 3 or T.ndim != 2 or F.shape[2] != T.shape[1]:
        raise ShapeError(f"incompatible shapes T{T.shape} F{F.shape}")
    C, N, D = F.shape
    # one GEMM instead of a per-pair contraction
    logits = (F.reshape(C * N, D) @ T.T).T.reshape(T.shape[0], C, N) / tau
    if frame_mask is not None:
        logits = np.where(frame_mask[None, :, :], logits, -np.inf)
    logits -= logits.max(axis=2, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=2, keepdims=True)
    return w


def aggregate_pairs(T: np.ndarray, F: np.ndarray, frame_mask: np.ndarray | None, tau: float) -> np.ndarray:
    """Video representation of every candidate conditioned on every query, ``(Q, C, D)``."""
    w = pair_weights(T, F, frame_mask, tau)
    # batched over candidates: (C, Q, N) @ (C, N, D) -> (C, Q, D)
    return np.matmul(w.transpose(1, 0, 2), F).transpose(1, 0, 2)


def global_similarity(T, V) -> float:
    """Cosine between whole text and video representations."""
    return numkit.cosine(T, V)


def global_similarity_matrix(T: np.ndarray, F: np.ndarray, frame_mask: np.ndarray | None, tau: float) -> np.ndarray:
    """Untrained global-alignment scores: cosine of each text with its conditioned video."""
    V = aggregate_pairs(T, F, frame_mask, tau)
    return numkit.cosine_last_axis(T[:, None, :], V)[0]

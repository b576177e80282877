"""Set-to-set scoring: per-factor confidences and confidence-weighted cosines."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import encoder, numkit
from .errors import ConfigError, ShapeError

if TYPE_CHECKING:
    from .model import AlignmentModel

# float64 elements per similarity_matrix work chunk
_CHUNK_ELEMS = 4_000_000


@dataclass
class ConfidenceMLP:
    """Two-layer MLP shared by all factor pairs: ReLU hidden, logistic output.

    ``W1`` is ``(2d, H)``; its first d rows act on the text factor and the
    last d rows on the video factor.
    """

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    @classmethod
    def init(cls, factor_dim: int, hidden: int, rng: np.random.Generator) -> "ConfidenceMLP":
        W1 = rng.standard_normal((2 * factor_dim, hidden)) * math.sqrt(2.0 / (2 * factor_dim))
        w2 = rng.standard_normal(hidden) / math.sqrt(hidden)
        return cls(W1, np.zeros(hidden), w2, 0.0)

    @classmethod
    def zeros(cls, factor_dim: int, hidden: int) -> "ConfidenceMLP":
        return cls(np.zeros((2 * factor_dim, hidden)), np.zeros(hidden), np.zeros(hidden), 0.0)

    @property
    def factor_dim(self) -> int:
        return self.W1.shape[0] // 2

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def forward(self, pairs: np.ndarray) -> np.ndarray:
        """``(..., 2d)`` concatenated factor pairs to confidences ``(...)``."""
        if pairs.shape[-1] != self.W1.shape[0]:
            raise ShapeError(f"MLP expects inputs of width {self.W1.shape[0]}, got {pairs.shape[-1]}")
        h = np.maximum(pairs @ self.W1 + self.b1, 0.0)
        return numkit.sigmoid(h @ self.w2 + self.b2)


def _factor_pair(text_factors, video_factors) -> tuple[np.ndarray, np.ndarray]:
    et = np.asarray(text_factors, dtype=np.float64)
    ev = np.asarray(video_factors, dtype=np.float64)
    if et.ndim != 2 or et.shape != ev.shape:
        raise ShapeError(f"factor sets must share shape (K, d): {et.shape} vs {ev.shape}")
    return et, ev


def confidence(text_factors, video_factors, mlp: ConfidenceMLP) -> np.ndarray:
    """Per-factor match confidence g in (0, 1) from the concatenated pair."""
    et, ev = _factor_pair(text_factors, video_factors)
    return mlp.forward(np.concatenate([et, ev], axis=1))


def factor_cosines(text_factors, video_factors) -> np.ndarray:
    et, ev = _factor_pair(text_factors, video_factors)
    return numkit.cosine_last_axis(et, ev)[0]


def adaptive_similarity(text_factors, video_factors, mlp: ConfidenceMLP | None = None, g=None) -> float:
    """Sum over factors of confidence times factor cosine.

    Pass ``g`` to override the MLP (e.g. all ones for uniform pooling).
    """
    cos = factor_cosines(text_factors, video_factors)
    if g is None:
        if mlp is None:
            raise ConfigError("adaptive_similarity needs an MLP or explicit confidences")
        g = confidence(text_factors, video_factors, mlp)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != cos.shape:
        raise ShapeError(f"confidences {g.shape} do not match K={cos.shape[0]}")
    return float(g @ cos)


def similarity_matrix(T, F, model: "AlignmentModel", frame_mask=None, chunk_rows: int | None = None) -> np.ndarray:
    """Score every query text against every candidate video.

    ``T`` is ``(Q, D)`` and ``F`` is ``(C, N, D)``, optionally zero-padded with
    ``frame_mask``. Frames are projected once; each pair then costs O(N D)
    because both the video factor and the MLP's video-side pre-activation are
    linear in the pooled frames and can be pooled after projection.
    """
    T = np.asarray(T, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if T.ndim != 2 or F.ndim != 3:
        raise ShapeError(f"expected T (Q, D) and F (C, N, D), got {T.shape} and {F.shape}")
    D = model.dim
    if T.shape[1] != D or F.shape[2] != D:
        raise ConfigError(f"features have D={T.shape[1]}/{F.shape[2]} but the model expects D={D}")
    K, d = model.k, model.factor_dim
    Q, C, N = T.shape[0], F.shape[0], F.shape[1]

    Et = (T @ model.Wt.T).reshape(Q, K, d)
    P = F @ model.Wv.T  # (C, N, D)
    adaptive = model.pooling == "adaptive"
    if adaptive:
        mlp = model.mlp
        H = mlp.hidden
        Ht = Et @ mlp.W1[:d] + mlp.b1  # (Q, K, H)
        Hv = (P.reshape(C, N, K, d) @ mlp.W1[d:]).reshape(C, N, K * H)

    per_row = C * N + C * D * (3 if adaptive else 1)
    step = chunk_rows or max(1, _CHUNK_ELEMS // max(per_row, 1))
    S = np.empty((Q, C))
    for lo in range(0, Q, step):
        hi = min(Q, lo + step)
        w = encoder.pair_weights(T[lo:hi], F, frame_mask, model.tau).transpose(1, 0, 2)  # (C, q, N)
        Ev = np.matmul(w, P).transpose(1, 0, 2).reshape(hi - lo, C, K, d)
        cos = numkit.cosine_last_axis(Et[lo:hi, None], Ev)[0]  # (q, C, K)
        if adaptive:
            pre = np.matmul(w, Hv).transpose(1, 0, 2).reshape(hi - lo, C, K, H) + Ht[lo:hi, None]
            g = numkit.sigmoid(np.maximum(pre, 0.0) @ mlp.w2 + mlp.b2)
            S[lo:hi] = np.sum(g * cos, axis=2)
        else:
            S[lo:hi] = np.sum(cos, axis=2)
    return S


def querybank_normalize(S, bank, temperature: float = 0.05, enabled: bool = False, dynamic: bool = True) -> np.ndarray:
    """Inverted-softmax renormalization of test scores against a query bank.

    Each score becomes ``exp(S_lk / t) / sum_b exp(bank_bk / t)``, returned in
    log form (a strictly increasing transform, so rankings are unaffected by
    the log). With ``dynamic`` only queries whose top candidate is the top
    candidate of some bank query are renormalized; others keep ``S / t``.
    Disabled, the input is returned unchanged.
    """
    S = np.asarray(S, dtype=np.float64)
    if not enabled:
        return S
    bank = np.asarray(bank, dtype=np.float64)
    if bank.ndim != 2 or bank.shape[0] == 0:
        raise ConfigError("querybank normalization is on but the bank is empty")
    if S.ndim != 2 or bank.shape[1] != S.shape[1]:
        raise ShapeError(f"bank has {bank.shape[1]} candidates, scores have {S.shape[1]}")
    if not temperature > 0:
        raise ConfigError(f"querybank temperature must be positive, got {temperature}")
    log_mass = numkit.logsumexp(bank / temperature, axis=0)  # (C,)
    out = S / temperature - log_mass[None, :]
    if dynamic:
        activated = np.zeros(S.shape[1], dtype=bool)
        activated[np.argmax(bank, axis=1)] = True
        keep = ~activated[np.argmax(S, axis=1)]
        out[keep] = S[keep] / temperature
    return out

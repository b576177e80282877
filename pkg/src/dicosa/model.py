"""Trainable parameter container for the alignment head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alignment import ConfidenceMLP
from .concepts import check_k, init_projection
from .errors import ConfigError

POOLING_MODES = ("adaptive", "uniform")
PARAM_KEYS = ("Wt", "Wv", "W1", "b1", "w2", "b2")
INIT_MODES = ("identity", "orthogonal", "gaussian")


@dataclass
class AlignmentModel:
    dim: int
    k: int
    tau: float
    pooling: str = "adaptive"
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        check_k(self.dim, self.k)
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")

    @classmethod
    def init(cls, dim: int, k: int, tau: float = 3.0, pooling: str = "adaptive",
             hidden: int | None = None, seed: int = 0, init: str = "identity",
             tied: bool = True) -> "AlignmentModel":
        """Fresh parameters.

        ``init`` picks the projection start: ``identity`` makes factor k the
        k-th contiguous block of the embedding; ``orthogonal`` and ``gaussian``
        are random draws with entry std 1/sqrt(D). With ``tied`` the video
        projection starts as a copy of the text one, since both modalities
        share one embedding space.
        """
        d = check_k(dim, k)
        hidden = hidden or 2 * d
        rng = np.random.default_rng(seed)
        if init == "identity":
            Wt = np.eye(dim)
        elif init in ("orthogonal", "gaussian"):
            Wt = init_projection(dim, k, rng, orthogonal=init == "orthogonal")
        else:
            raise ConfigError(f"init must be one of {INIT_MODES}, got {init!r}")
        Wv = Wt.copy() if tied or init == "identity" else init_projection(dim, k, rng, orthogonal=init == "orthogonal")
        mlp = ConfidenceMLP.init(d, hidden, rng)
        params = {"Wt": Wt, "Wv": Wv, "W1": mlp.W1, "b1": mlp.b1, "w2": mlp.w2, "b2": np.zeros(1)}
        return cls(dim, k, tau, pooling, params)

    @property
    def factor_dim(self) -> int:
        return self.dim // self.k

    @property
    def hidden(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def Wt(self) -> np.ndarray:
        return self.params["Wt"]

    @property
    def Wv(self) -> np.ndarray:
        return self.params["Wv"]

    @property
    def mlp(self) -> ConfidenceMLP:
        p = self.params
        return ConfidenceMLP(p["W1"], p["b1"], p["w2"], float(p["b2"][0]))

    def copy(self) -> "AlignmentModel":
        return AlignmentModel(self.dim, self.k, self.tau, self.pooling,
                              {key: v.copy() for key, v in self.params.items()})

    def text_factors(self, T) -> np.ndarray:
        T = np.asarray(T, dtype=np.float64)
        return (T @ self.Wt.T).reshape(*T.shape[:-1], self.k, self.factor_dim)

    def video_factors(self, V) -> np.ndarray:
        V = np.asarray(V, dtype=np.float64)
        return (V @ self.Wv.T).reshape(*V.shape[:-1], self.k, self.factor_dim)

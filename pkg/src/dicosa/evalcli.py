"""Retrieval metrics, evaluation, per-factor inspection and hyper-parameter sweeps."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import alignment, dataio, encoder
from .dataio import FeatureRecord
from .errors import ConfigError, DataError, DicosaError, ShapeError
from .model import AlignmentModel
from .trainer import Checkpoint, TrainConfig, train

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
DIRECTIONS = ("t2v", "v2t")
REPORT_FIELDS = ("direction", "n", "R@1", "R@5", "R@10", "MdR", "MnR")
INSPECT_FIELDS = ("factor_index", "s_k", "g_k", "contribution")
SWEEP_FIELDS = ("k", "alpha", "beta", "seed", "status") + REPORT_FIELDS[1:] + ("L", "L_S", "L_D", "L_A")


@dataclass(frozen=True)
class RetrievalReport:
    direction: str
    n: int
    r1: float
    r5: float
    r10: float
    mdr: float
    mnr: float

    def as_row(self) -> dict:
        return dict(zip(REPORT_FIELDS, (self.direction, self.n, self.r1, self.r5, self.r10, self.mdr, self.mnr)))


def ranks(S, ground_truth) -> np.ndarray:
    """1-based rank of each query's true candidate.

    Candidates are ordered by descending score; equal scores are ordered by
    ascending candidate index.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] == 0 or S.shape[1] == 0:
        raise ShapeError(f"similarity matrix must be a non-empty 2-D array, got {S.shape}")
    gt = np.asarray(ground_truth)
    if gt.shape != (S.shape[0],) or not np.issubdtype(gt.dtype, np.integer):
        raise DataError(f"need one integer ground-truth index per query ({S.shape[0]}), got {gt.shape}")
    missing = (gt < 0) | (gt >= S.shape[1])
    if missing.any():
        raise DataError(f"query {int(np.argmax(missing))} has no ground-truth candidate")
    q = np.arange(S.shape[0])
    target = S[q, gt][:, None]
    cols = np.arange(S.shape[1])[None, :]
    ahead = (S > target) | ((S == target) & (cols < gt[:, None]))
    return 1 + ahead.sum(axis=1)


def retrieval_metrics(S, ground_truth=None, direction: str = "t2v") -> RetrievalReport:
    """R@1/5/10 in percent, lower-median rank and mean rank.

    ``ground_truth[i]`` is the candidate index of query i's match; the
    default pairs query i with candidate i.
    """
    S = np.asarray(S, dtype=np.float64)
    if ground_truth is None:
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise DataError("implicit diagonal ground truth needs a square matrix")
        ground_truth = np.arange(S.shape[0])
    r = ranks(S, ground_truth)
    n = len(r)
    recall = [100.0 * np.count_nonzero(r <= L) / n for L in (1, 5, 10)]
    mdr = float(np.sort(r)[(n - 1) // 2])
    return RetrievalReport(direction, int(S.shape[1]), *recall, mdr, float(r.mean()))


def _invert(gt: np.ndarray, n_candidates: int) -> np.ndarray:
    """Ground truth of the transposed problem; requires a one-to-one pairing."""
    inv = np.full(n_candidates, -1, dtype=np.int64)
    inv[gt] = np.arange(len(gt))
    if len(gt) != n_candidates or np.any(inv < 0):
        raise DataError("video-to-text evaluation needs a one-to-one text/video pairing")
    return inv


def _model(ckpt) -> AlignmentModel:
    return ckpt.model if isinstance(ckpt, Checkpoint) else ckpt


def score_store(model: AlignmentModel, records: Sequence[FeatureRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Text x video similarity matrix of a store and the ground-truth index per text."""
    if not records:
        raise DataError("store is empty")
    if records[0].dim != model.dim:
        raise ConfigError(f"store has D={records[0].dim} but the checkpoint expects D={model.dim}")
    T, F, M = dataio.stack_records(records)
    return alignment.similarity_matrix(T, F, model, M), dataio.ground_truth_indices(records, records)


def evaluate(ckpt, records: Sequence[FeatureRecord], direction: str = "t2v", qbnorm: bool = False,
             bank: Sequence[FeatureRecord] | None = None, qb_temp: float = 0.05) -> list[RetrievalReport]:
    """Score a store and report the requested directions (``t2v``, ``v2t`` or ``both``).

    With ``qbnorm`` the bank's texts (for t2v) or videos (for v2t) act as
    reference queries against the store's candidates.
    """
    if direction not in (*DIRECTIONS, "both"):
        raise ConfigError(f"direction must be t2v, v2t or both, got {direction!r}")
    model = _model(ckpt)
    S, gt = score_store(model, records)
    if qbnorm and bank is not None and bank and bank[0].dim != model.dim:
        raise ConfigError(f"bank has D={bank[0].dim} but the checkpoint expects D={model.dim}")
    wanted = DIRECTIONS if direction == "both" else (direction,)
    out = []
    for d in wanted:
        scores, truth = (S, gt) if d == "t2v" else (S.T, _invert(gt, S.shape[1]))
        if qbnorm:
            scores = alignment.querybank_normalize(scores, _bank_scores(model, records, bank, d),
                                                   temperature=qb_temp, enabled=True)
        out.append(retrieval_metrics(scores, truth, d))
    return out


def _bank_scores(model: AlignmentModel, records, bank, direction: str) -> np.ndarray:
    if not bank:
        raise ConfigError("querybank normalization is on but the bank is empty")
    T, F, M = dataio.stack_records(records)
    bT, bF, bM = dataio.stack_records(bank)
    if direction == "t2v":
        return alignment.similarity_matrix(bT, F, model, M)
    return alignment.similarity_matrix(T, bF, model, bM).T


# --------------------------------------------------------------------------
# inspection


@dataclass
class Inspection:
    rows: list[dict]
    total: float


def inspect(ckpt, text: FeatureRecord, video: FeatureRecord) -> Inspection:
    """Per-factor cosine, confidence and contribution for one text/video pair."""
    model = _model(ckpt)
    if text.dim != model.dim or video.dim != model.dim:
        raise ConfigError(f"samples have D={text.dim}/{video.dim} but the checkpoint expects D={model.dim}")
    V = encoder.aggregate_video(text.text_embedding, video.frames, encoder.AggregationParams(model.tau))
    et, ev = model.text_factors(text.text_embedding), model.video_factors(V)
    s = alignment.factor_cosines(et, ev)
    g = alignment.confidence(et, ev, model.mlp) if model.pooling == "adaptive" else np.ones(model.k)
    contrib = g * s
    rows = [{"factor_index": i, "s_k": float(s[i]), "g_k": float(g[i]), "contribution": float(contrib[i])}
            for i in range(model.k)]
    return Inspection(rows, float(contrib.sum()))


def pair_confidences(ckpt, records: Sequence[FeatureRecord]) -> np.ndarray:
    """Confidences ``(n, K)`` of each record's text against its own video."""
    model = _model(ckpt)
    T, F, M = dataio.stack_records(records)
    i = np.arange(len(records))
    w = encoder.pair_weights(T, F, M, model.tau)[i, i]
    V = np.einsum("bn,bnd->bd", w, F)
    et, ev = model.text_factors(T), model.video_factors(V)
    return model.mlp.forward(np.concatenate([et, ev], axis=-1))


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic; ties count half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores for {y.size} labels")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC-AUC needs both positive and negative labels")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    # average ranks over tied runs
    start = 0
    for end in range(1, s.size + 1):
        if end == s.size or sorted_s[end] != sorted_s[start]:
            ranks[order[start:end]] = 0.5 * (start + end - 1) + 1
            start = end
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepGrid:
    k: list[int]
    alpha: list[float]
    beta: list[float]
    seeds: list[int]
    base: TrainConfig
    test_size: int = 64
    split_seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "SweepGrid":
        data = dict(data)
        base = TrainConfig.from_dict(data.pop("base", {}))
        allowed = {"k", "alpha", "beta", "seeds", "test_size", "split_seed"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown grid keys: {sorted(unknown)}")

        def axis(name, default):
            v = data.get(name, [default])
            return list(v) if isinstance(v, (list, tuple)) else [v]

        return cls(axis("k", base.k), axis("alpha", base.alpha), axis("beta", base.beta),
                   axis("seeds", base.seed), base, int(data.get("test_size", 64)), int(data.get("split_seed", 0)))

    def points(self):
        return itertools.product(self.k, self.alpha, self.beta, self.seeds)


def run_point(config: TrainConfig, train_records, test_records) -> dict:
    """Train one configuration and evaluate text-to-video on the held-out records."""
    res = train(train_records, config)
    report = evaluate(res.checkpoint, test_records, "t2v")[0]
    last = res.epochs[-1] if res.epochs else {"L": np.nan, "L_S": np.nan, "L_D": np.nan, "L_A": np.nan}
    row = report.as_row()
    row.pop("direction")
    return {**row, **{key: last[key] for key in ("L", "L_S", "L_D", "L_A")}}


def sweep(grid: SweepGrid, records: Sequence[FeatureRecord]) -> list[dict]:
    """One row per (grid point, seed). Invalid points yield a warning row instead of failing."""
    train_records, test_records = dataio.split(records, grid.test_size, grid.split_seed)
    dim = records[0].dim
    rows = []
    for k, alpha, beta, seed in grid.points():
        row = {"k": k, "alpha": alpha, "beta": beta, "seed": seed}
        config = replace(grid.base, k=k, alpha=alpha, beta=beta, seed=seed)
        try:
            config.validate(dim)
        except DicosaError as exc:
            log.warning("skipping grid point k=%s alpha=%s beta=%s: %s", k, alpha, beta, exc)
            rows.append({**row, "status": f"skipped: {exc}"})
            continue
        rows.append({**row, "status": "ok", **run_point(config, train_records, test_records)})
    return rows


# --------------------------------------------------------------------------
# report emission


def _csv_text(fields: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema_version={REPORT_SCHEMA_VERSION}\n")
    w = csv.DictWriter(buf, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in fields})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def reports_csv(reports: Sequence[RetrievalReport]) -> str:
    return _csv_text(REPORT_FIELDS, [r.as_row() for r in reports])


def reports_json(reports: Sequence[RetrievalReport]) -> str:
    return json.dumps({"schema_version": REPORT_SCHEMA_VERSION, "reports": [r.as_row() for r in reports]},
                      indent=2)


def reports_table(reports: Sequence[RetrievalReport]) -> str:
    lines = [f"{'dir':<4} {'N':>6} {'R@1':>7} {'R@5':>7} {'R@10':>7} {'MdR':>6} {'MnR':>8}"]
    for r in reports:
        lines.append(f"{r.direction:<4} {r.n:>6d} {r.r1:>7.2f} {r.r5:>7.2f} {r.r10:>7.2f} {r.mdr:>6.1f} {r.mnr:>8.2f}")
    return "\n".join(lines)


def inspection_csv(result: Inspection) -> str:
    rows = result.rows + [{"factor_index": "total", "contribution": result.total}]
    return _csv_text(INSPECT_FIELDS, rows)


def covariance_csv(C: np.ndarray) -> str:
    k = C.shape[0]
    return _csv_text(["i"] + [f"c{j}" for j in range(k)],
                     [{"i": i, **{f"c{j}": float(C[i, j]) for j in range(k)}} for i in range(k)])


def sweep_csv(rows: Sequence[dict]) -> str:
    return _csv_text(SWEEP_FIELDS, rows)


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def read_csv_report(text: str) -> list[dict]:
    """Parse a CSV emitted above, checking its schema version."""
    lines = text.splitlines()
    if not lines or lines[0] != f"# schema_version={REPORT_SCHEMA_VERSION}":
        raise DataError("unrecognized report schema")
    return list(csv.DictReader(lines[1:]))


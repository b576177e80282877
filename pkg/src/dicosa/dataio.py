"""Feature stores, the synthetic partial-matching generator, and batching.

A store is a directory holding ``manifest.json`` plus one ``{sample_id}.f32``
blob per record. Each blob is little-endian float32, row-major: the text
embedding (D values) followed by the frame matrix (N_v x D values).
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import BatchSizeError, ConfigError, CorruptStoreError, DataError, ShapeError, VersionError

STORE_VERSION = 1
MANIFEST_NAME = "manifest.json"
FRAME_ACTIVATION_PROB = 0.7

_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
_F32 = np.dtype("<f4")


@dataclass
class FeatureRecord:
    sample_id: str
    text_embedding: np.ndarray
    frames: np.ndarray
    pair_id: str = ""
    concept_mask: np.ndarray | None = None

    def __post_init__(self):
        self.text_embedding = np.asarray(self.text_embedding, dtype=np.float64)
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if not self.pair_id:
            self.pair_id = self.sample_id
        if self.concept_mask is not None:
            self.concept_mask = np.asarray(self.concept_mask, dtype=bool)

    @property
    def dim(self) -> int:
        return self.text_embedding.shape[0]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def validate(self, dim: int | None = None) -> None:
        if not _ID_RE.match(self.sample_id):
            raise DataError(f"sample_id {self.sample_id!r} is not a safe file name")
        if self.text_embedding.ndim != 1:
            raise ShapeError(f"{self.sample_id}: text embedding must be 1-D")
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ShapeError(f"{self.sample_id}: frames must be an (N_v >= 1, D) matrix")
        if self.frames.shape[1] != self.dim:
            raise ShapeError(f"{self.sample_id}: frame dim {self.frames.shape[1]} != text dim {self.dim}")
        if dim is not None and self.dim != dim:
            raise ShapeError(f"{self.sample_id}: dimension {self.dim} does not match store dimension {dim}")
        if not (np.all(np.isfinite(self.text_embedding)) and np.all(np.isfinite(self.frames))):
            raise DataError(f"{self.sample_id}: non-finite embedding values")


@dataclass
class SyntheticConfig:
    num_samples: int = 256
    k_true: int = 8
    concept_dim: int = 64
    num_frames: int = 12
    mismatch_prob: float = 0.25
    noise_sigma: float = 0.05
    seed: int = 0
    dim: int | None = field(default=None)

    def __post_init__(self):
        if self.dim is None:
            self.dim = self.k_true * self.concept_dim

    def validate(self) -> None:
        if self.num_samples < 1 or self.k_true < 1 or self.concept_dim < 1 or self.num_frames < 1:
            raise ConfigError("num_samples, k_true, concept_dim and num_frames must be >= 1")
        if self.dim % self.k_true != 0 or self.dim != self.k_true * self.concept_dim:
            raise ConfigError(f"D={self.dim} must equal k_true * concept_dim = {self.k_true} * {self.concept_dim}")
        if not 0.0 <= self.mismatch_prob <= 1.0:
            raise ConfigError(f"mismatch_prob must lie in [0, 1], got {self.mismatch_prob}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def _frame_activations(rng: np.random.Generator, num_frames: int, k: int) -> np.ndarray:
    active = rng.random((num_frames, k)) < FRAME_ACTIVATION_PROB
    # every frame shows at least one concept
    empty = ~active.any(axis=1)
    if empty.any():
        active[empty, rng.integers(0, k, size=int(empty.sum()))] = True
    # every concept appears in at least one frame
    missing = ~active.any(axis=0)
    if missing.any():
        active[rng.integers(0, num_frames, size=int(missing.sum())), missing] = True
    return active


def generate_synthetic(config: SyntheticConfig) -> tuple[list[FeatureRecord], np.ndarray]:
    """Draw a store whose text and video share concept codes, up to mismatches.

    Returns the records and a ``(num_samples, k_true)`` boolean mask that is
    True where a concept is shared by both modalities. Inactive concepts are
    zeroed per frame and active ones rescaled so that, without noise, the mean
    over frames of each concept block equals the video-side code.
    Values are rounded through float32 so in-memory records match the store.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    k, d, nv = config.k_true, config.concept_dim, config.num_frames
    records: list[FeatureRecord] = []
    masks = np.empty((config.num_samples, k), dtype=bool)
    width = len(str(config.num_samples - 1))
    for i in range(config.num_samples):
        codes = rng.standard_normal((k, d))
        shared = rng.random(k) >= config.mismatch_prob
        video_codes = np.where(shared[:, None], codes, rng.standard_normal((k, d)))
        active = _frame_activations(rng, nv, k)
        scale = nv / active.sum(axis=0)
        blocks = active[:, :, None] * (video_codes * scale[:, None])[None, :, :]
        frames = blocks.reshape(nv, k * d)
        text = codes.reshape(k * d)
        if config.noise_sigma > 0:
            text = text + config.noise_sigma * rng.standard_normal(k * d)
            frames = frames + config.noise_sigma * rng.standard_normal((nv, k * d))
        sid = f"s{i:0{width}d}"
        records.append(
            FeatureRecord(
                sample_id=sid,
                text_embedding=text.astype(_F32).astype(np.float64),
                frames=frames.astype(_F32).astype(np.float64),
                pair_id=sid,
                concept_mask=shared,
            )
        )
        masks[i] = shared
    return records, masks


def _blob_bytes(rec: FeatureRecord) -> bytes:
    payload = np.concatenate([rec.text_embedding[None, :], rec.frames], axis=0)
    return payload.astype(_F32).tobytes(order="C")


def write_store(records: Sequence[FeatureRecord], path) -> Path:
    """Write records to a store directory; validates everything before touching disk."""
    if not records:
        raise DataError("refusing to write an empty store")
    dim = records[0].dim
    seen: set[str] = set()
    for rec in records:
        rec.validate(dim)
        if rec.sample_id in seen:
            raise DataError(f"duplicate sample_id {rec.sample_id!r}")
        seen.add(rec.sample_id)
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        blob = _blob_bytes(rec)
        name = f"{rec.sample_id}.f32"
        (root / name).write_bytes(blob)
        entry = {
            "sample_id": rec.sample_id,
            "pair_id": rec.pair_id,
            "num_frames": rec.num_frames,
            "blob": name,
            "nbytes": len(blob),
            "sha256": hashlib.sha256(blob).hexdigest(),
        }
        if rec.concept_mask is not None:
            entry["concept_mask"] = [bool(x) for x in rec.concept_mask]
        entries.append(entry)
    manifest = {"version": STORE_VERSION, "dim": dim, "count": len(records), "dtype": "float32-le", "records": entries}
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return root


def read_store(path) -> list[FeatureRecord]:
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise CorruptStoreError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptStoreError(f"{mpath}: invalid JSON ({exc})") from exc
    version = manifest.get("version")
    if version != STORE_VERSION:
        raise VersionError(f"unsupported store version {version!r} (expected {STORE_VERSION})")
    try:
        dim = int(manifest["dim"])
        count = int(manifest["count"])
        entries = manifest["records"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptStoreError(f"{mpath}: missing or malformed field {exc}") from exc
    if len(entries) != count:
        raise CorruptStoreError(f"manifest declares {count} records but lists {len(entries)}")
    records = []
    for entry in entries:
        try:
            name = str(entry["blob"])
            nv = int(entry["num_frames"])
            nbytes = int(entry["nbytes"])
            sample_id = str(entry["sample_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptStoreError(f"{mpath}: malformed record entry ({exc!r})") from exc
        if Path(name).name != name or name in ("", ".", ".."):
            raise CorruptStoreError(f"blob name {name!r} must be a plain file name inside the store")
        expected = (nv + 1) * dim * _F32.itemsize
        bpath = root / name
        if not bpath.is_file():
            raise CorruptStoreError(f"blob {name} is missing")
        blob = bpath.read_bytes()
        if len(blob) != expected or len(blob) != nbytes:
            raise CorruptStoreError(f"blob {name} has {len(blob)} bytes, expected {expected}")
        if "sha256" in entry and hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise CorruptStoreError(f"blob {name} fails its checksum")
        payload = np.frombuffer(blob, dtype=_F32).astype(np.float64).reshape(nv + 1, dim)
        mask = entry.get("concept_mask")
        rec = FeatureRecord(
            sample_id=sample_id,
            text_embedding=payload[0].copy(),
            frames=payload[1:].copy(),
            pair_id=entry.get("pair_id", sample_id),
            concept_mask=None if mask is None else np.asarray(mask, dtype=bool),
        )
        rec.validate(dim)
        records.append(rec)
    return records


def store_masks(records: Sequence[FeatureRecord]) -> np.ndarray:
    if any(r.concept_mask is None for r in records):
        raise DataError("store carries no ground-truth concept masks")
    return np.stack([r.concept_mask for r in records])


def ground_truth_indices(texts: Sequence[FeatureRecord], videos: Sequence[FeatureRecord]) -> np.ndarray:
    """Index of the true video for each text, resolved through ``pair_id``."""
    index = {r.sample_id: i for i, r in enumerate(videos)}
    out = np.empty(len(texts), dtype=np.int64)
    for i, r in enumerate(texts):
        if r.pair_id not in index:
            raise DataError(f"text {r.sample_id!r} has no ground-truth video {r.pair_id!r} among candidates")
        out[i] = index[r.pair_id]
    return out


def split(records: Sequence[FeatureRecord], test_size: int, seed: int = 0):
    """Seeded train/test split; the test part keeps pairs whole."""
    n = len(records)
    if not 0 < test_size < n:
        raise ConfigError(f"test_size must lie in (0, {n}), got {test_size}")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:test_size])
    train_idx = np.sort(perm[test_size:])
    return [records[i] for i in train_idx], [records[i] for i in test_idx]


def epoch_seed(seed: int, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch])


def batches(n: int, batch_size: int, seed: int, epoch: int = 0, drop_last: bool = True) -> list[np.ndarray]:
    """Index batches for one epoch; each epoch reshuffles with a derived seed."""
    if batch_size < 2:
        raise BatchSizeError(f"batch size must be >= 2, got {batch_size}")
    perm = np.random.default_rng(epoch_seed(seed, epoch)).permutation(n)
    out = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if drop_last and out and len(out[-1]) < batch_size:
        out.pop()
    return out


def iter_epochs(n: int, batch_size: int, seed: int, epochs: int, drop_last: bool = True) -> Iterator[tuple[int, np.ndarray]]:
    for epoch in range(epochs):
        for b in batches(n, batch_size, seed, epoch, drop_last):
            yield epoch, b


def stack_batch(records: Sequence[FeatureRecord], idx=None):
    """Stack a training batch; see ``stack_records``. Needs at least 2 records."""
    recs = records if idx is None else [records[i] for i in idx]
    if len(recs) < 2:
        raise BatchSizeError(f"batch of size {len(recs)} cannot feed batch statistics (need >= 2)")
    return stack_records(recs)


def stack_records(recs: Sequence[FeatureRecord]):
    """Return texts ``(B, D)``, zero-padded frames ``(B, N_max, D)`` and a frame mask ``(B, N_max)``."""
    if not recs:
        raise ShapeError("no records to stack")
    dims = {r.dim for r in recs}
    if len(dims) != 1:
        raise ShapeError(f"records disagree on D: {sorted(dims)}")
    (dim,) = dims
    n_max = max(r.num_frames for r in recs)
    T = np.stack([r.text_embedding for r in recs])
    F = np.zeros((len(recs), n_max, dim))
    mask = np.zeros((len(recs), n_max), dtype=bool)
    for i, r in enumerate(recs):
        F[i, : r.num_frames] = r.frames
        mask[i, : r.num_frames] = True
    return T, F, mask

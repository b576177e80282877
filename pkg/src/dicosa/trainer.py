"""Training objective, Adam with linear warmup, the training loop, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import concepts, dataio, encoder, numkit
from .dataio import FeatureRecord
from .errors import BatchSizeError, CheckpointError, ConfigError, NumericalError, ShapeError, VersionError
from .model import INIT_MODES, PARAM_KEYS, POOLING_MODES, AlignmentModel

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HEADS = ("dicosa", "global")


@dataclass
class TrainConfig:
    k: int = 8
    alpha: float = 0.01
    beta: float = 0.005
    tau_prime: float = 0.01
    tau: float = 3.0
    batch_size: int = 128
    epochs: int = 5
    lr: float = 1e-3
    warmup_fraction: float = 0.1
    seed: int = 0
    pooling: str = "adaptive"
    head: str = "dicosa"
    hidden: int | None = None
    init: str = "identity"
    tied_init: bool = True

    def validate(self, dim: int | None = None) -> None:
        if self.k < 1:
            raise ConfigError(f"K must be >= 1, got {self.k}")
        if dim is not None:
            concepts.check_k(dim, self.k)
        for name in ("tau_prime", "tau", "lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.batch_size < 2:
            raise BatchSizeError(f"batch size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0 <= self.warmup_fraction <= 1:
            raise ConfigError("warmup_fraction must lie in [0, 1]")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}")
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")
        if self.head == "global" and (self.k != 1 or self.pooling != "uniform"):
            raise ConfigError("the global head is the K=1 uniform-pooling model")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def global_baseline(cls, **overrides) -> "TrainConfig":
        base = dict(k=1, pooling="uniform", head="global", alpha=0.0, beta=0.0)
        base.update(overrides)
        return cls(**base)


# --------------------------------------------------------------------------
# objective


def infonce_and_grad(S, tau_prime: float) -> tuple[float, np.ndarray]:
    """Symmetric InfoNCE over a square score matrix with positives on the diagonal."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"InfoNCE needs a square matrix, got {S.shape}")
    B = S.shape[0]
    X = S / tau_prime
    lr_ = numkit.log_softmax(X, axis=1)
    lc = numkit.log_softmax(X, axis=0)
    loss = -0.5 * (np.trace(lr_) / B + np.trace(lc) / B)
    eye = np.eye(B)
    dX = 0.5 * ((np.exp(lr_) - eye) + (np.exp(lc) - eye)) / B
    return float(max(loss, 0.0)), dX / tau_prime


def infonce(S, tau_prime: float) -> float:
    return infonce_and_grad(S, tau_prime)[0]


def compose_loss(ls: float, ld: float, la: float, alpha: float, beta: float) -> float:
    return ls + alpha * ld + beta * la


def _cosine_backward(dcos, a, b, cos, na, nb, valid):
    inv = np.where(valid, 1.0 / np.where(valid, na * nb, 1.0), 0.0)[..., None]
    na2 = np.where(valid, na * na, 1.0)[..., None]
    nb2 = np.where(valid, nb * nb, 1.0)[..., None]
    dc = (dcos * valid)[..., None]
    da = dc * (b * inv - cos[..., None] * a / na2)
    db = dc * (a * inv - cos[..., None] * b / nb2)
    return da, db


def head_loss(params: dict, T: np.ndarray, Vpair: np.ndarray, k: int, pooling: str,
              alpha: float, beta: float, tau_prime: float, need_grad: bool = True,
              ls_weight: float = 1.0):
    """Total loss of the factorized head on one batch.

    ``Vpair[l, m]`` is video m pooled under text l; its diagonal holds the
    positive pairs that feed the covariance. Returns
    ``(L, (L_S, L_D, L_A), grads, C)``; ``grads`` is None unless requested.
    ``ls_weight`` scales the contrastive term (0 isolates the covariance losses).
    """
    B, D = T.shape
    d = concepts.check_k(D, k)
    if B < 2:
        raise BatchSizeError(f"losses need a batch of at least 2, got {B}")
    Wt, Wv = params["Wt"], params["Wv"]
    Et = (T @ Wt.T).reshape(B, k, d)
    Ev = (Vpair @ Wv.T).reshape(B, B, k, d)
    Etb = np.broadcast_to(Et[:, None], Ev.shape)
    cos, _, na, nb, valid = numkit.cosine_last_axis(Etb, Ev)

    adaptive = pooling == "adaptive"
    if adaptive:
        W1, b1, w2, b2 = params["W1"], params["b1"], params["w2"], params["b2"][0]
        pre = (Et @ W1[:d])[:, None] + Ev @ W1[d:] + b1  # (B, B, K, H)
        hid = np.maximum(pre, 0.0)
        g = numkit.sigmoid(hid @ w2 + b2)
        S = np.sum(g * cos, axis=2)
    else:
        S = np.sum(cos, axis=2)

    ls, dS = infonce_and_grad(S, tau_prime)
    dS = ls_weight * dS
    diag = np.arange(B)
    C, cache = concepts.covariance_forward(Et, Ev[diag, diag])
    ld = concepts.loss_decouple(C)
    la = concepts.loss_align(C)
    total = compose_loss(ls_weight * ls, ld, la, alpha, beta)
    if not need_grad:
        return total, (ls, ld, la), None, C

    grads = {key: np.zeros_like(v) for key, v in params.items()}
    if adaptive:
        dg = dS[:, :, None] * cos
        dcos = dS[:, :, None] * g
        dz = dg * g * (1.0 - g)
        grads["w2"] = np.einsum("lmkh,lmk->h", hid, dz)
        grads["b2"] = np.array([dz.sum()])
        dpre = dz[..., None] * w2 * (pre > 0)
        grads["b1"] = dpre.sum(axis=(0, 1, 2))
        dpre_t = dpre.sum(axis=1)  # (B, K, H)
        grads["W1"] = np.concatenate(
            [
                np.einsum("lkd,lkh->dh", Et, dpre_t),
                np.einsum("lmkd,lmkh->dh", Ev, dpre),
            ]
        )
        dEt = dpre_t @ W1[:d].T
        dEv = dpre @ W1[d:].T
    else:
        dcos = np.broadcast_to(dS[:, :, None], cos.shape)
        dEt = np.zeros_like(Et)
        dEv = np.zeros_like(Ev)

    da, db = _cosine_backward(dcos, Etb, Ev, cos, na, nb, valid)
    dEt = dEt + da.sum(axis=1)
    dEv = dEv + db

    dC = alpha * concepts.loss_decouple_grad(C) + beta * concepts.loss_align_grad(C)
    if alpha or beta:
        dEt_c, dEv_c = concepts.covariance_backward(dC, cache)
        dEt = dEt + dEt_c
        dEv[diag, diag] += dEv_c

    grads["Wt"] = dEt.reshape(B, D).T @ T
    grads["Wv"] = dEv.reshape(B * B, D).T @ Vpair.reshape(B * B, D)
    return total, (ls, ld, la), grads, C


def global_loss(params: dict, T: np.ndarray, Vpair: np.ndarray, tau_prime: float, need_grad: bool = True):
    """InfoNCE on whole-vector cosines of projected text and video (the baseline)."""
    B, D = T.shape
    Wt, Wv = params["Wt"], params["Wv"]
    x = T @ Wt.T  # (B, D)
    y = Vpair @ Wv.T  # (B, B, D)
    xb = np.broadcast_to(x[:, None, :], y.shape)
    S, _, nx, ny, valid = numkit.cosine_last_axis(xb, y)
    ls, dS = infonce_and_grad(S, tau_prime)
    if not need_grad:
        return ls, (ls, 0.0, 0.0), None, None
    dx, dy = _cosine_backward(dS, xb, y, S, nx, ny, valid)
    grads = {key: np.zeros_like(v) for key, v in params.items()}
    grads["Wt"] = dx.sum(axis=1).T @ T
    grads["Wv"] = dy.reshape(B * B, D).T @ Vpair.reshape(B * B, D)
    return ls, (ls, 0.0, 0.0), grads, None


def pooled_pairs(T: np.ndarray, F: np.ndarray, frame_mask, tau: float) -> np.ndarray:
    return encoder.aggregate_pairs(T, F, frame_mask, tau)


def _loss(model: AlignmentModel, config: TrainConfig, T, F, mask, params=None, need_grad=True):
    params = model.params if params is None else params
    Vpair = pooled_pairs(T, F, mask, model.tau)
    if config.head == "global":
        return global_loss(params, T, Vpair, config.tau_prime, need_grad)
    return head_loss(params, T, Vpair, model.k, model.pooling, config.alpha, config.beta,
                     config.tau_prime, need_grad)


def total_loss(batch, model: AlignmentModel, config: TrainConfig):
    """``(L, (L_S, L_D, L_A))`` for a batch of records or a stacked ``(T, F, mask)``."""
    T, F, mask = _as_stacked(batch)
    total, parts, _, _ = _loss(model, config, T, F, mask, need_grad=False)
    return total, parts


def total_loss_and_grad(batch, model: AlignmentModel, config: TrainConfig, params=None):
    T, F, mask = _as_stacked(batch)
    total, parts, grads, _ = _loss(model, config, T, F, mask, params=params)
    return total, parts, grads


def _as_stacked(batch):
    if isinstance(batch, tuple):
        return batch
    return dataio.stack_batch(list(batch))


# --------------------------------------------------------------------------
# optimizer and schedule


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    return int(round(warmup_fraction * total_steps))


def lr_at(step: int, base_lr: float, warmup: int) -> float:
    """Linear ramp from 0 over ``warmup`` steps, constant afterwards."""
    if warmup <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for key, p in params.items():
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# --------------------------------------------------------------------------
# training loop


@dataclass
class Checkpoint:
    config: TrainConfig
    model: AlignmentModel
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    total_steps: int = 0
    version: int = CHECKPOINT_VERSION


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    steps: list[dict]
    epochs: list[dict]


def init_checkpoint(dim: int, config: TrainConfig) -> Checkpoint:
    config.validate(dim)
    model = AlignmentModel.init(dim, config.k, config.tau, config.pooling, config.hidden, config.seed,
                                init=config.init, tied=config.tied_init)
    return Checkpoint(config=config, model=model)


def _snapshot(model: AlignmentModel, opt: Adam, config: TrainConfig, step: int, total: int) -> Checkpoint:
    return Checkpoint(
        config=config,
        model=model.copy(),
        adam_m={k: v.copy() for k, v in opt.m.items()},
        adam_v={k: v.copy() for k, v in opt.v.items()},
        step=step,
        total_steps=total,
    )


def train(
    records: Sequence[FeatureRecord],
    config: TrainConfig,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run Adam over seeded, epoch-reshuffled batches.

    ``resume`` continues from a checkpoint's step counter; ``max_steps``
    stops after that many updates in this call. Batches of a given epoch
    depend only on ``(seed, epoch)``, so a resumed run replays exactly.
    """
    if not records:
        raise ConfigError("cannot train on an empty store")
    dim = records[0].dim
    config.validate(dim)
    T_all, F_all, M_all = dataio.stack_records(records)
    n = len(records)
    per_epoch = n // config.batch_size
    if per_epoch == 0 and config.epochs > 0:
        raise BatchSizeError(f"{n} samples cannot fill one batch of {config.batch_size}")
    total = per_epoch * config.epochs
    warm = warmup_steps(total, config.warmup_fraction)

    ckpt = resume if resume is not None else init_checkpoint(dim, config)
    if ckpt.model.dim != dim:
        raise ConfigError(f"checkpoint D={ckpt.model.dim} does not match data D={dim}")
    model = ckpt.model.copy()
    opt = Adam()
    opt.m = {k: v.copy() for k, v in ckpt.adam_m.items()}
    opt.v = {k: v.copy() for k, v in ckpt.adam_v.items()}
    opt.t = ckpt.step
    step = ckpt.step
    stop = total if max_steps is None else min(total, step + max_steps)

    step_log: list[dict] = []
    while step < stop:
        epoch, pos = divmod(step, per_epoch)
        idx = dataio.batches(n, config.batch_size, config.seed, epoch, drop_last=True)[pos]
        loss, (ls, ld, la), grads = total_loss_and_grad((T_all[idx], F_all[idx], M_all[idx]), model, config)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            # nothing has been applied yet, so the current state is the last good one
            raise TrainingDiverged(f"non-finite loss at step {step}", _snapshot(model, opt, config, step, total))
        lr = lr_at(step + 1, config.lr, warm)
        opt.step(model.params, grads, lr)
        step += 1
        entry = {"step": step, "epoch": epoch, "L": loss, "L_S": ls, "L_D": ld, "L_A": la, "lr": lr}
        step_log.append(entry)
        if on_step is not None:
            on_step(entry)
        if (step % per_epoch == 0) and log.isEnabledFor(logging.INFO):
            log.info("epoch %d done: L=%.4f L_S=%.4f L_D=%.4f L_A=%.4f", epoch, loss, ls, ld, la)

    final = _snapshot(model, opt, config, step, total)
    return TrainResult(final, step_log, epoch_summary(step_log))


def epoch_summary(step_log: Sequence[dict]) -> list[dict]:
    by_epoch: dict[int, list[dict]] = {}
    for e in step_log:
        by_epoch.setdefault(e["epoch"], []).append(e)
    out = []
    for epoch, rows in sorted(by_epoch.items()):
        out.append({"epoch": epoch, **{k: float(np.mean([r[k] for r in rows])) for k in ("L", "L_S", "L_D", "L_A")}})
    return out


def dataset_covariance(model: AlignmentModel, records: Sequence[FeatureRecord]) -> np.ndarray:
    """Factor covariance of matched pairs over the whole store."""
    T, F, mask = dataio.stack_batch(list(records))
    w = encoder.pair_weights(T, F, mask, model.tau)
    diag = np.arange(len(records))
    V = np.einsum("bn,bnd->bd", w[diag, diag], F)
    return concepts.covariance(model.text_factors(T), model.video_factors(V))


# --------------------------------------------------------------------------
# persistence

_HEADER_FIELDS = ("version", "config", "dim", "k", "tau", "pooling", "step", "total_steps", "shapes")


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write a zip archive: a JSON header plus raw little-endian float64 blocks."""
    model = ckpt.model
    header = {
        "version": ckpt.version,
        "config": asdict(ckpt.config),
        "dim": model.dim,
        "k": model.k,
        "tau": model.tau,
        "pooling": model.pooling,
        "step": ckpt.step,
        "total_steps": ckpt.total_steps,
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "has_moments": sorted(ckpt.adam_m),
    }
    blobs = {"header.json": json.dumps(header, sort_keys=True).encode("utf-8")}
    for prefix, table in (("param", model.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for key, arr in sorted(table.items()):
            blobs[f"{prefix}/{key}.f64"] = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in blobs.items():
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "header.json" not in names:
                raise CheckpointError(f"{path}: missing header")
            raw_header = zf.read("header.json")
            blobs = {n: zf.read(n) for n in names if n != "header.json"}
    except (zipfile.BadZipFile, EOFError, OSError) as exc:
        raise CheckpointError(f"{path}: truncated or unreadable checkpoint ({exc})") from exc
    try:
        header = json.loads(raw_header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header must be a JSON object")
    for name in _HEADER_FIELDS:
        if name not in header:
            raise CheckpointError(f"{path}: header field {name!r} is missing")
    if header["version"] != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: header field 'version' is {header['version']!r}, expected {CHECKPOINT_VERSION}")
    try:
        config = TrainConfig.from_dict(header["config"])
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: header field 'config' is invalid ({exc})") from exc
    shapes = header["shapes"]
    if not isinstance(shapes, dict) or set(shapes) != set(PARAM_KEYS):
        raise CheckpointError(f"{path}: header field 'shapes' does not list the parameter blocks")

    def block(prefix: str, key: str) -> np.ndarray:
        name = f"{prefix}/{key}.f64"
        if name not in blobs:
            raise CheckpointError(f"{path}: block {name} is missing")
        shape = tuple(int(s) for s in shapes[key])
        data = blobs[name]
        if len(data) != 8 * math.prod(shape):
            raise CheckpointError(f"{path}: block {name} has {len(data)} bytes, header field 'shapes' implies {8 * math.prod(shape)}")
        return np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)

    params = {key: block("param", key) for key in PARAM_KEYS}
    moments = header.get("has_moments", [])
    try:
        model = AlignmentModel(int(header["dim"]), int(header["k"]), float(header["tau"]), header["pooling"], params)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: header fields 'dim'/'k'/'pooling' are inconsistent ({exc})") from exc
    return Checkpoint(
        config=config,
        model=model,
        adam_m={key: block("adam_m", key) for key in moments},
        adam_v={key: block("adam_v", key) for key in moments},
        step=int(header["step"]),
        total_steps=int(header["total_steps"]),
        version=int(header["version"]),
    )

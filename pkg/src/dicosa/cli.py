"""Command-line entry point: ``dicosa {gen-data,train,eval,inspect,sweep}``.

Log verbosity comes from ``DICOSA_LOG_LEVEL`` (default WARNING). Library
errors map to categorized exit codes; see ``errors.py``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import dataio, evalcli, trainer
from .errors import ConfigError, DataError, DicosaError

log = logging.getLogger("dicosa")

# flag name -> TrainConfig field
_TRAIN_OVERRIDES = {
    "k": "k", "alpha": "alpha", "beta": "beta", "tau_prime": "tau_prime", "tau": "tau",
    "batch": "batch_size", "epochs": "epochs", "lr": "lr", "seed": "seed",
}


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _emit(text: str, out: str | None) -> None:
    if out:
        evalcli.write_text(out, text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_gen_data(args) -> int:
    cfg = dataio.SyntheticConfig(
        num_samples=args.samples, k_true=args.k_true, concept_dim=args.concept_dim,
        num_frames=args.frames, mismatch_prob=args.mismatch_prob, noise_sigma=args.noise, seed=args.seed,
    )
    records, _ = dataio.generate_synthetic(cfg)
    dataio.write_store(records, args.out)
    print(f"wrote {len(records)} samples (D={cfg.dim}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    resume = trainer.load_checkpoint(args.resume) if args.resume else None
    if args.config:
        base = trainer.TrainConfig.from_dict(_read_json(args.config))
    elif resume is not None:
        # a resumed run keeps its schedule unless told otherwise
        base = resume.config
    else:
        base = trainer.TrainConfig()
    overrides = {field: getattr(args, flag) for flag, field in _TRAIN_OVERRIDES.items() if getattr(args, flag) is not None}
    config = replace(base, **overrides)
    records = dataio.read_store(args.data)
    metrics_path = Path(args.metrics) if args.metrics else Path(str(args.out) + ".metrics.jsonl")
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    with metrics_path.open("w", encoding="utf-8") as fh:
        def on_step(entry):
            fh.write(json.dumps(entry) + "\n")
        try:
            result = trainer.train(records, config, resume=resume, on_step=on_step)
        except trainer.TrainingDiverged as exc:
            trainer.save_checkpoint(args.out, exc.checkpoint)
            log.error("training diverged; last good state saved to %s", args.out)
            raise
    trainer.save_checkpoint(args.out, result.checkpoint)
    for e in result.epochs:
        print(f"epoch {e['epoch']}: L={e['L']:.4f} L_S={e['L_S']:.4f} L_D={e['L_D']:.4f} L_A={e['L_A']:.4f}")
    print(f"saved {args.out} after {result.checkpoint.step} steps; metrics in {metrics_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    records = dataio.read_store(args.data)
    bank = dataio.read_store(args.bank) if args.bank else None
    if args.qbnorm and bank is None:
        raise ConfigError("--qbnorm needs --bank DIR")
    reports = evalcli.evaluate(ckpt, records, args.direction, qbnorm=args.qbnorm, bank=bank, qb_temp=args.qb_temp)
    if args.format == "csv":
        _emit(evalcli.reports_csv(reports), args.out)
    elif args.format == "json":
        _emit(evalcli.reports_json(reports), args.out)
    else:
        _emit(evalcli.reports_table(reports), args.out)
    return 0


def cmd_inspect(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    records = {r.sample_id: r for r in dataio.read_store(args.data)}
    for sid in (args.text, args.video):
        if sid not in records:
            raise DataError(f"sample {sid!r} is not in {args.data}")
    result = evalcli.inspect(ckpt, records[args.text], records[args.video])
    text = evalcli.inspection_csv(result)
    if args.covariance:
        C = trainer.dataset_covariance(ckpt.model, list(records.values()))
        text += evalcli.covariance_csv(C)
    _emit(text, args.out)
    return 0


def cmd_sweep(args) -> int:
    grid_spec = _read_json(args.grid)
    data = args.data or grid_spec.get("data")
    out = args.out or grid_spec.get("out")
    grid_spec = {k: v for k, v in grid_spec.items() if k not in ("data", "out")}
    if not data:
        raise ConfigError("sweep needs a store: give --data or a 'data' key in the grid file")
    grid = evalcli.SweepGrid.from_dict(grid_spec)
    rows = evalcli.sweep(grid, dataio.read_store(data))
    _emit(evalcli.sweep_csv(rows), out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dicosa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic feature store")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=256)
    g.add_argument("--k-true", type=int, default=8)
    g.add_argument("--concept-dim", type=int, default=64)
    g.add_argument("--frames", type=int, default=12)
    g.add_argument("--mismatch-prob", type=float, default=0.25)
    g.add_argument("--noise", type=float, default=0.05)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a checkpoint on a feature store")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file of TrainConfig fields")
    t.add_argument("--metrics", help="JSON-lines step log (default: <out>.metrics.jsonl)")
    t.add_argument("--resume", help="continue from this checkpoint")
    for flag, typ in (("k", int), ("alpha", float), ("beta", float), ("tau-prime", float), ("tau", float),
                      ("batch", int), ("epochs", int), ("lr", float), ("seed", int)):
        t.add_argument(f"--{flag}", type=typ, dest=flag.replace("-", "_"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval metrics of a checkpoint on a store")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--direction", choices=("t2v", "v2t", "both"), default="both")
    e.add_argument("--qbnorm", action="store_true")
    e.add_argument("--bank", help="store whose samples form the query bank")
    e.add_argument("--qb-temp", type=float, default=0.05)
    e.add_argument("--format", choices=("table", "csv", "json"), default="table")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="per-factor cosines and confidences of one pair")
    i.add_argument("--data", required=True)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--text", required=True)
    i.add_argument("--video", required=True)
    i.add_argument("--covariance", action="store_true", help="also dump the store's factor covariance")
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect)

    s = sub.add_parser("sweep", help="train and evaluate over a K/alpha/beta grid")
    s.add_argument("--grid", required=True)
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    level = os.environ.get("DICOSA_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DicosaError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error [IOError]: {exc}", file=sys.stderr)
        return 7


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``rexup {gen,train,eval,suite,attn}``.

Options resolve as flags > ``--config`` JSON file > built-in defaults. Exit
code 0 on success, 2 on validation errors, 3 on numeric aborts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, NumericError, ValidationError
from .harness import (
    SUITE_CORPUS,
    SUITE_DEFAULTS,
    TRAIN_DEFAULTS,
    TrainConfig,
    dump_attention,
    evaluate,
    run_suite,
    train,
)
from .network import ModelConfig, indexed_samples
from .params import load_checkpoint
from .synth import generate_dataset, read_dataset, write_dataset

log = logging.getLogger("rexup")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3

# flag name -> config-file key; a flag left at None falls through to the file, then the default
_TRAIN_KEYS = ("d", "cells", "sgkb", "sd", "lr", "batch", "epochs", "seed", "patience", "dtype")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(data) - set(_TRAIN_KEYS) - {"scenes", "per_type", "graph_questions", "seeds"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return data


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge flags over the config file over ``defaults``."""
    merged = dict(defaults)
    merged.update({k: v for k, v in _load_config(getattr(args, "config", None)).items()})
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


def _train_config(opts: dict, checkpoint: str | None = None) -> TrainConfig:
    model = ModelConfig(
        d=int(opts["d"]),
        cells=int(opts["cells"]),
        use_sgkb_branch=bool(opts["sgkb"]),
        use_sd_fusion=bool(opts["sd"]),
        dtype=str(opts["dtype"]),
        seed=int(opts["seed"]),
    )
    return TrainConfig(
        model=model,
        lr=float(opts["lr"]),
        batch_size=int(opts["batch"]),
        epochs=int(opts["epochs"]),
        seed=int(opts["seed"]),
        patience=int(opts["patience"]),
        checkpoint=checkpoint,
    )


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    splits = generate_dataset(args.seed, args.scenes, per_type_count=args.per_type, graph_count=args.graph_questions)
    write_dataset(args.out, splits)
    for name, split in splits.items():
        print(f"{name}: {len(split.scenes)} scenes, {len(split)} questions")
    return EXIT_OK


def cmd_train(args) -> int:
    opts = resolve(args, TRAIN_DEFAULTS)
    splits = read_dataset(args.data)
    if "train" not in splits:
        raise ConfigError(f"{args.data} has no train split")
    config = _train_config(opts, args.out)
    res = train(config, splits["train"], splits.get("val"), meta={"data_dir": str(Path(args.data).resolve())})
    print(f"best epoch {res.best_epoch}; checkpoint written to {args.out}")
    print(res.metrics.to_table())
    return EXIT_OK


def cmd_eval(args) -> int:
    splits = read_dataset(args.data)
    if args.split not in splits:
        raise ConfigError(f"{args.data} has no {args.split} split")
    metrics = evaluate(args.ckpt, splits[args.split])
    print(metrics.to_table())
    if args.csv:
        Path(args.csv).write_text(metrics.to_csv())
    return EXIT_OK


def cmd_suite(args) -> int:
    opts = resolve(args, SUITE_DEFAULTS)
    splits = read_dataset(args.data)
    for need in ("train", "val"):
        if need not in splits:
            raise ConfigError(f"{args.data} has no {need} split")
    seeds = tuple(int(s) for s in opts["seeds"])
    report = run_suite(splits, _train_config(opts), seeds=seeds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_markdown())
    out.with_suffix(".csv").write_text(report.to_csv())
    print(report.to_markdown())
    return EXIT_OK


def cmd_attn(args) -> int:
    data = args.data
    if data is None:
        _, meta = load_checkpoint(args.ckpt)
        data = meta.get("data_dir")
        if data is None:
            raise ConfigError("checkpoint does not record its data directory; pass --data")
    splits = read_dataset(data)
    names = [args.split] if args.split else list(splits)
    holder = next((splits[n] for n in names if n in splits and any(sid == args.sample for sid, _, _ in indexed_samples(splits[n]))), None)
    if holder is None:
        raise ConfigError(f"unknown sample id {args.sample!r}")
    doc = dump_attention(args.ckpt, holder, args.sample, args.out)
    print(f"{len(doc['records'])} attention records written to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of defaults; explicit flags win")
    p.add_argument("--d", type=int)
    p.add_argument("--cells", type=int)
    p.add_argument("--no-sgkb", dest="sgkb", action="store_const", const=False)
    p.add_argument("--no-sd", dest="sd", action="store_const", const=False)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rexup", description="REXUP reasoning network on synthetic VQA data")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-type", type=int, default=SUITE_CORPUS["per_type_count"], help="questions per family per scene")
    p.add_argument("--graph-questions", type=int, default=SUITE_CORPUS["graph_count"], help="relation questions per scene")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "testdev", "test"), default="val")
    p.add_argument("--csv", help="also write per-type metrics as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("suite", help="ablation grid and cell-count sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+")
    _add_model_flags(p)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("attn", help="dump attention weights of one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="sample id, <scene id>/<question index>, e.g. 0-00017/2")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory (defaults to the one recorded at training)")
    p.add_argument("--split")
    p.set_defaults(func=cmd_attn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``dualocc {dataset build, train, eval, ablate, bench, plot}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, RunConfig


def _config(args) -> RunConfig:
    base = RunConfig.from_file(args.config) if args.config else RunConfig()
    return base.with_overrides(args.set) if args.set else base


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--data-dir", type=Path, help="dataset cache root (default: $BEPO_DATA_DIR)")


def _ints(text: str) -> List[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualocc", description="Dual-branch camera occupancy: data, training, "
                                     "evaluation, ablations, benchmarks and plots.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress (epochs, runs) to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="synthetic dataset management")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    build = ds_sub.add_parser("build", help="generate and cache train/val scenes")
    _add_config_args(build)
    build.add_argument("--workers", type=int, default=1)

    tr = sub.add_parser("train", help="train one model")
    _add_config_args(tr)
    tr.add_argument("--out", type=Path, required=True, help="run directory")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--split", default="val", choices=["train", "val"])
    ev.add_argument("--csv", type=Path, help="per-sample report CSV")
    ev.add_argument("--data-dir", type=Path)

    ab = sub.add_parser("ablate", help="matched-seed ablation sweep")
    _add_config_args(ab)
    ab.add_argument("--axis", required=True, choices=["cross_attention", "branch", "query_count"])
    ab.add_argument("--seeds", type=_ints, default=[0, 1, 2], help="comma-separated seeds (default 0,1,2)")
    ab.add_argument("--values", type=_ints, help="query counts for the query_count axis")
    ab.add_argument("--out", type=Path, required=True, help="sweep directory; finished runs are reused")

    be = sub.add_parser("bench", help="latency benchmark")
    _add_config_args(be)
    be.add_argument("--checkpoint", type=Path, help="benchmark this checkpoint instead of a fresh model")
    be.add_argument("--queries", type=_ints, help="sweep these query counts (fresh models)")
    be.add_argument("--repeats", type=int, default=10)
    be.add_argument("--warmup", type=int, default=3)
    be.add_argument("--csv", type=Path)

    pl = sub.add_parser("plot", help="render figures from CSV files")
    pl.add_argument("kind", choices=["scatter", "curves"])
    pl.add_argument("csv", nargs="+", type=Path)
    pl.add_argument("--out", type=Path, required=True)
    pl.add_argument("--x", default="fps")
    pl.add_argument("--y", default="miou")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"dualocc: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "dataset":
        from .data import build_dataset
        print(build_dataset(_config(args), args.data_dir, args.workers))
    elif args.command == "train":
        from .train import train
        res = train(_config(args), args.out, args.data_dir)
        print(json.dumps({"checkpoint": str(res.checkpoint_path), "val_miou": res.final.miou,
                          "val_fscore": res.final.fscore}))
    elif args.command == "eval":
        from .train import evaluate
        rep = evaluate(args.checkpoint, args.split, args.csv, args.data_dir)
        print(json.dumps({"miou": rep.miou, "precision": rep.precision, "recall": rep.recall,
                          "fscore": rep.fscore, "per_class_iou": rep.per_class_iou}))
    elif args.command == "ablate":
        from .ablate import ablate
        table, _ = ablate(_config(args), args.axis, args.out, args.seeds, args.values, args.data_dir)
        for row in table:
            print(json.dumps(row))
    elif args.command == "bench":
        _bench(args)
    elif args.command == "plot":
        from .plot import scatter, training_curves
        out = scatter(args.csv, args.out, args.x, args.y) if args.kind == "scatter" else \
            training_curves(args.csv, args.out)
        print(out)
    return 0


def _bench(args) -> None:
    from .bench import bench_interleaved, write_bench_csv
    from .model import OccupancyModel
    if args.checkpoint:
        from .train import load_checkpoint
        models = [load_checkpoint(args.checkpoint).model]
    else:
        cfg = _config(args)
        models = [OccupancyModel(cfg.replace(num_queries=q)) for q in (args.queries or [cfg.num_queries])]
    reports = bench_interleaved(models, args.repeats, args.warmup)
    for r in reports:
        print(json.dumps(r.row()))
    if args.csv:
        write_bench_csv(args.csv, reports)


if __name__ == "__main__":
    sys.exit(main())

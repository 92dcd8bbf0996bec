"""Matched-seed ablations over cross-attention, branch selection and query count."""
from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from ..scenegen import CLASS_NAMES
from .bench import bench
from .config import RunConfig
from .data import SplitData, build_dataset, load_split
from .model import OccupancyModel
from .train import train

log = logging.getLogger(__name__)

AXES = ("cross_attention", "branch", "query_count")


def axis_settings(axis: str, values: Optional[Sequence[int]] = None) -> List[Tuple[str, Dict]]:
    """``(setting name, config overrides)`` pairs for one ablation axis."""
    if axis == "cross_attention":
        return [("ca_on", {"cross_attention": True}), ("ca_off", {"cross_attention": False})]
    if axis == "branch":
        return [("fused", {}), ("bev_only", {"point_branch": False}), ("points_only", {"bev_branch": False})]
    if axis == "query_count":
        return [(f"q{q}", {"num_queries": int(q)}) for q in (values or (16, 32, 64))]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


@dataclass
class RunResult:
    setting: str
    seed: int
    miou: float
    fscore: float
    per_class_iou: Dict[int, float]
    fps: Optional[float] = None
    seconds: Optional[float] = None  # wall-clock training time

    def row(self) -> Dict:
        d = {"setting": self.setting, "seed": self.seed, "miou": self.miou, "fscore": self.fscore}
        d.update({f"iou_{CLASS_NAMES[c]}": v for c, v in self.per_class_iou.items()})
        if self.fps is not None:
            d["fps"] = self.fps
        return d


def run_setting(cfg: RunConfig, out_dir: Path, train_data: SplitData, val_data: SplitData,
                name: str = "") -> RunResult:
    """Train one config (or reuse a finished run with the same config hash) and return its val metrics."""
    out_dir.mkdir(parents=True, exist_ok=True)
    result_path = out_dir / "result.json"
    if result_path.exists():
        cached = json.loads(result_path.read_text())
        if cached.get("config_hash") == cfg.hash():
            return RunResult(name, cfg.seed, cached["miou"], cached["fscore"],
                             {int(k): v for k, v in cached["per_class_iou"].items()}, None, cached.get("seconds"))
    t0 = time.perf_counter()
    res = train(cfg, out_dir, train_data=train_data, val_data=val_data)
    out = RunResult(name, cfg.seed, res.final.miou, res.final.fscore, dict(res.final.per_class_iou),
                    seconds=time.perf_counter() - t0)
    result_path.write_text(json.dumps({"config_hash": cfg.hash(), "miou": out.miou, "fscore": out.fscore,
                                       "per_class_iou": out.per_class_iou, "seconds": out.seconds}))
    return out


def ablate(cfg: RunConfig, axis: str, out_dir: Union[str, Path], seeds: Sequence[int] = (0, 1, 2),
           values: Optional[Sequence[int]] = None, data_dir=None, bench_repeats: int = 10
           ) -> Tuple[List[Dict], List[RunResult]]:
    """Train every setting of ``axis`` for each seed; write ``runs.csv`` and ``table.csv``.

    Returns the table (one row per setting, medians over seeds) and the per-run results.
    """
    out_dir = Path(out_dir)
    build_dataset(cfg, data_dir)
    train_data, val_data = load_split(cfg, "train", data_dir), load_split(cfg, "val", data_dir)
    runs: List[RunResult] = []
    settings = axis_settings(axis, values)
    for name, over in settings:
        for seed in seeds:
            run_cfg = cfg.replace(seed=int(seed), **over)
            log.info("ablation %s/%s seed %d", axis, name, seed)
            r = run_setting(run_cfg, out_dir / name / f"seed{seed}", train_data, val_data, name)
            if axis == "query_count":
                r.fps = bench(OccupancyModel(run_cfg), repeats=bench_repeats).fps
            runs.append(r)
    table = summarize(runs, [n for n, _ in settings])
    _write_rows(out_dir / "runs.csv", [r.row() for r in runs])
    _write_rows(out_dir / "table.csv", table)
    return table, runs


BENCHMARK_SETTINGS = {
    "full": {},
    "no_ca": {"cross_attention": False},
    "bev_only": {"point_branch": False},
    "q32": {"num_queries": 32},
}


def benchmark_suite(cfg: RunConfig, out_dir: Union[str, Path], seeds: Sequence[int] = (0, 1, 2),
                    data_dir=None, settings: Optional[Dict[str, Dict]] = None) -> Dict[str, List[RunResult]]:
    """Train the shared matched-seed runs behind the ablation comparisons.

    ``settings`` maps a name to config overrides (default: full model, no cross-attention,
    BEV-only and Q=32). Finished runs are reused, so repeated calls only pay for missing ones.
    """
    out_dir = Path(out_dir)
    build_dataset(cfg, data_dir)
    train_data, val_data = load_split(cfg, "train", data_dir), load_split(cfg, "val", data_dir)
    results: Dict[str, List[RunResult]] = {}
    for name, over in (settings or BENCHMARK_SETTINGS).items():
        for seed in seeds:
            log.info("benchmark %s seed %d", name, seed)
            run_cfg = cfg.replace(seed=int(seed), **over)
            results.setdefault(name, []).append(
                run_setting(run_cfg, out_dir / name / f"seed{seed}", train_data, val_data, name))
    _write_rows(out_dir / "runs.csv", [r.row() for rs in results.values() for r in rs])
    return results


def summarize(runs: Sequence[RunResult], order: Sequence[str]) -> List[Dict]:
    table = []
    for name in order:
        group = [r for r in runs if r.setting == name]
        row = {"setting": name, "seeds": len(group),
               "miou": statistics.median(r.miou for r in group),
               "fscore": statistics.median(r.fscore for r in group)}
        for c in group[0].per_class_iou:
            row[f"iou_{CLASS_NAMES[c]}"] = statistics.median(r.per_class_iou[c] for r in group)
        if group[0].fps is not None:
            row["fps"] = statistics.median(r.fps for r in group)
        table.append(row)
    return table


def _write_rows(path: Path, rows: List[Dict]) -> None:
    keys: List[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)

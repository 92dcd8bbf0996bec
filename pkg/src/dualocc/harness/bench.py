"""Latency benchmark: per-branch and end-to-end wall time on a fixed input."""
from __future__ import annotations

import csv
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .model import OccupancyModel

BRANCH_KEYS = ("backbone_ms", "points_ms", "bev_ms", "total_ms")


@dataclass
class BenchReport:
    num_queries: int
    repeats: int
    warmup: int
    median_ms: float
    p95_ms: float
    fps: float
    branch_ms: Dict[str, float] = field(default_factory=dict)  # medians per diagnostic key
    samples_ms: List[float] = field(default_factory=list)

    def row(self) -> Dict[str, float]:
        d = {k: v for k, v in asdict(self).items() if k not in ("branch_ms", "samples_ms")}
        d.update({f"median_{k}": v for k, v in self.branch_ms.items()})
        return d


def fixed_input(model: OccupancyModel, batch: int = 1, seed: int = 0) -> torch.Tensor:
    cfg = model.cfg
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(batch, cfg.num_cameras, cfg.image_h, cfg.image_w, 3, generator=gen)


@torch.no_grad()
def bench(model: OccupancyModel, repeats: int = 10, warmup: int = 3, images: Optional[torch.Tensor] = None,
          threads: int = 1) -> BenchReport:
    """Median / p95 over ``repeats`` timed forwards after ``warmup`` untimed ones."""
    if warmup < 3:
        raise ValueError("bench needs at least 3 warm-up iterations")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(threads)
    try:
        model.eval()
        images = fixed_input(model) if images is None else images
        for _ in range(warmup):
            model(images)
        diags = [model(images).diagnostics for _ in range(repeats)]
    finally:
        torch.set_num_threads(prev_threads)
    return _report(model, diags, warmup)


def _report(model: OccupancyModel, diags: List[Dict[str, float]], warmup: int) -> BenchReport:
    totals = [d["total_ms"] for d in diags]
    median = statistics.median(totals)
    branch = {k: statistics.median(d[k] for d in diags) for k in BRANCH_KEYS if k in diags[0]}
    return BenchReport(model.cfg.num_queries, len(diags), warmup, median, float(np.percentile(totals, 95)),
                       1000.0 / median, branch, totals)


@torch.no_grad()
def bench_interleaved(models: Sequence[OccupancyModel], repeats: int = 10, warmup: int = 3,
                      threads: int = 1) -> List[BenchReport]:
    """Benchmark several models round-robin so machine-load drift hits every model alike.

    Each round times one forward per model, visiting the models in a rotated order.
    """
    if warmup < 3:
        raise ValueError("bench needs at least 3 warm-up iterations")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(threads)
    try:
        inputs = [fixed_input(m) for m in models]
        for m, x in zip(models, inputs):
            m.eval()
            for _ in range(warmup):
                m(x)
        diags: List[List[Dict[str, float]]] = [[] for _ in models]
        n = len(models)
        for r in range(repeats):
            for k in range(n):
                i = (r + k) % n
                diags[i].append(models[i](inputs[i]).diagnostics)
    finally:
        torch.set_num_threads(prev_threads)
    return [_report(m, d, warmup) for m, d in zip(models, diags)]


def write_bench_csv(path: Union[str, Path], reports: List[BenchReport]) -> None:
    rows = [r.row() for r in reports]
    keys: List[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)

"""Occupancy evaluation: per-class IoU / mIoU and distance-thresholded precision / recall / F-score."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ContractError, VoxelGrid


@dataclass
class MetricReport:
    per_class_iou: Dict[int, float]  # NaN for classes absent from both grids
    miou: float
    precision: float
    recall: float
    fscore: float
    delta: float
    counts: Dict[int, Tuple[int, int, int]] = field(default_factory=dict)  # class -> (TP, FP, FN)
    sample_id: str = ""

    def evaluated_classes(self) -> List[int]:
        return [c for c, v in self.per_class_iou.items() if not np.isnan(v)]


def _check_same_grid(pred: VoxelGrid, gt: VoxelGrid) -> None:
    if pred.spec != gt.spec or pred.payload.shape != gt.payload.shape:
        raise ContractError("prediction and ground truth must share one grid spec")
    if not (pred.is_labels and gt.is_labels):
        raise ContractError("metrics need label payloads")


def harmonic(p: float, r: float) -> float:
    return 0.0 if p <= 0 or r <= 0 else 2.0 / (1.0 / p + 1.0 / r)


def class_iou(pred: VoxelGrid, gt: VoxelGrid, num_classes: int
              ) -> Tuple[Dict[int, float], Dict[int, Tuple[int, int, int]], float]:
    """Per-class voxel IoU over semantic classes ``1..C``; free (0) is never a class."""
    _check_same_grid(pred, gt)
    p, g = pred.payload.ravel(), gt.payload.ravel()
    ious, counts = {}, {}
    for c in range(1, num_classes + 1):
        pc, gc = p == c, g == c
        tp = int(np.count_nonzero(pc & gc))
        fp = int(np.count_nonzero(pc & ~gc))
        fn = int(np.count_nonzero(~pc & gc))
        counts[c] = (tp, fp, fn)
        ious[c] = tp / (tp + fp + fn) if tp + fp + fn else float("nan")
    vals = [v for v in ious.values() if not np.isnan(v)]
    return ious, counts, float(np.mean(vals)) if vals else float("nan")


def fscore(pred: VoxelGrid, gt: VoxelGrid, delta: Optional[float] = None) -> Tuple[float, float, float]:
    """Precision, recall, F-score between occupied voxel centres.

    A centre counts as matched when its nearest neighbour in the other set
    is strictly closer than ``delta`` metres (default: one voxel).
    """
    _check_same_grid(pred, gt)
    vs = gt.spec.voxel_size
    delta = vs if delta is None else delta
    if delta <= 0:
        raise ContractError("delta must be positive")
    # centres differ by integer multiples of the voxel size, so compare in index units
    p = np.argwhere(pred.payload > 0).astype(np.float64)
    g = np.argwhere(gt.payload > 0).astype(np.float64)
    thr = delta / vs
    if len(p) == 0 and len(g) == 0:
        return 1.0, 1.0, 1.0
    if len(p) == 0 or len(g) == 0:
        return 0.0, 0.0, 0.0
    d_pg, _ = cKDTree(g).query(p, k=1)
    d_gp, _ = cKDTree(p).query(g, k=1)
    prec = float(np.mean(d_pg < thr))
    rec = float(np.mean(d_gp < thr))
    return prec, rec, harmonic(prec, rec)


def evaluate_sample(pred: VoxelGrid, gt: VoxelGrid, num_classes: int, delta: Optional[float] = None,
                    sample_id: str = "") -> MetricReport:
    ious, counts, m = class_iou(pred, gt, num_classes)
    delta = gt.spec.voxel_size if delta is None else delta
    prec, rec, f = fscore(pred, gt, delta)
    return MetricReport(ious, m, prec, rec, f, delta, counts, sample_id)


def aggregate(reports: Sequence[MetricReport]) -> MetricReport:
    """Per-class IoU averaged over the samples that evaluate the class; mIoU over those class means."""
    if not reports:
        raise ContractError("nothing to aggregate")
    classes = sorted(reports[0].per_class_iou)
    per_class = {}
    for c in classes:
        vals = [r.per_class_iou[c] for r in reports if not np.isnan(r.per_class_iou[c])]
        per_class[c] = float(np.mean(vals)) if vals else float("nan")
    evaluated = [v for v in per_class.values() if not np.isnan(v)]
    counts = {c: tuple(int(sum(r.counts[c][i] for r in reports)) for i in range(3)) for c in classes}
    prec = float(np.mean([r.precision for r in reports]))
    rec = float(np.mean([r.recall for r in reports]))
    return MetricReport(per_class, float(np.mean(evaluated)) if evaluated else float("nan"), prec, rec,
                        harmonic(prec, rec), reports[0].delta, counts, "aggregate")


def write_report_csv(path: Union[str, Path], reports: Sequence[MetricReport], agg: Optional[MetricReport] = None
                     ) -> None:
    classes = sorted(reports[0].per_class_iou) if reports else sorted(agg.per_class_iou)
    rows = list(reports) + ([agg] if agg is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", *[f"iou_{c}" for c in classes], "miou", "precision", "recall", "fscore", "delta"])
        for r in rows:
            w.writerow([r.sample_id, *[r.per_class_iou[c] for c in classes], r.miou, r.precision, r.recall,
                        r.fscore, r.delta])

"""Static figures: accuracy-vs-speed scatter and training curves."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PathLike = Union[str, Path]
MARGIN = 0.05


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def padded_limits(values: Sequence[float], margin: float = MARGIN) -> Tuple[float, float]:
    """Data extent widened by ``margin`` of the span on each side."""
    lo, hi = min(values), max(values)
    span = hi - lo
    if span == 0:
        span = abs(lo) if lo != 0 else 1.0
    return lo - margin * span, hi + margin * span


def _save(fig, out: PathLike) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    # no timestamp or version metadata, so repeated runs write identical files
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out


def _floats(rows, key, path):
    try:
        return [float(r[key]) for r in rows]
    except KeyError:
        raise KeyError(f"{path}: missing column {key!r}") from None


def scatter(csv_paths: Sequence[PathLike], out: PathLike, x: str = "fps", y: str = "miou",
            label: str = "setting") -> Path:
    """One marker per CSV row across all files, annotated with the ``label`` column when present."""
    fig, ax = plt.subplots(figsize=(5, 4))
    xs_all, ys_all = [], []
    for path in csv_paths:
        rows = read_csv(path)
        xs, ys = _floats(rows, x, path), _floats(rows, y, path)
        ax.scatter(xs, ys, label=Path(path).stem)
        for r, xi, yi in zip(rows, xs, ys):
            if label in r:
                ax.annotate(r[label], (xi, yi), textcoords="offset points", xytext=(4, 4), fontsize=8)
        xs_all += xs
        ys_all += ys
    if not xs_all:
        raise ValueError("no rows to plot")
    ax.set_xlim(*padded_limits(xs_all))
    ax.set_ylim(*padded_limits(ys_all))
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.grid(alpha=0.3)
    if len(csv_paths) > 1:
        ax.legend(fontsize=8)
    return _save(fig, out)


def training_curves(csv_paths: Sequence[PathLike], out: PathLike,
                    keys: Sequence[str] = ("total", "l_vol", "val_miou")) -> Path:
    """Per-epoch curves from ``train_log.csv`` files; one panel per key."""
    logs = [(Path(p), read_csv(p)) for p in csv_paths]
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.5), squeeze=False)
    for ax, key in zip(axes[0], keys):
        xs_all, ys_all = [], []
        for path, rows in logs:
            pts = [(float(r["epoch"]), float(r[key])) for r in rows if r.get(key) not in (None, "")]
            if not pts:
                continue
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", markersize=3, label=path.parent.name or path.stem)
            xs_all += xs
            ys_all += ys
        if xs_all:
            ax.set_xlim(*padded_limits(xs_all))
            ax.set_ylim(*padded_limits(ys_all))
        ax.set_title(key)
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    if len(logs) > 1:
        axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, out)

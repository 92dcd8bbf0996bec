"""Training loop, LR schedule, checkpoints and split evaluation."""
from __future__ import annotations

import csv
import logging
import math
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import torch

from ..geometry import VoxelGrid
from ..losses import LossBreakdown, compute_losses
from ..metrics import MetricReport, aggregate, evaluate_sample, write_report_csv
from ..scenegen import CLASS_NAMES
from .config import RunConfig
from .data import SplitData, build_dataset, load_split
from .model import OccupancyModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def warmup_cosine(warmup: int, horizon: int) -> Callable[[int], float]:
    """Linear warm-up to 1 over ``warmup`` steps, then cosine decay to 0 at ``horizon``."""
    def factor(step: int) -> float:
        if warmup > 0 and step < warmup:
            return (step + 1) / warmup
        span = max(horizon - warmup, 1)
        progress = min(max(step - warmup, 0) / span, 1.0)
        return 0.5 * (1.0 + math.cos(math.pi * progress))
    return factor


def make_optimizer(model: torch.nn.Module, cfg: RunConfig, total_steps: int):
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    horizon = cfg.cosine_steps or total_steps
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_cosine(cfg.warmup_steps, horizon))
    return opt, sched


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], model: OccupancyModel, optimizer=None, scheduler=None,
                    epoch: int = 0, extra: Optional[Dict] = None) -> None:
    state = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "epoch": epoch,
        "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state(), "python": random.getstate()},
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "extra": extra or {},
    }
    torch.save(state, path)


@dataclass
class Checkpoint:
    model: OccupancyModel
    state: Dict

    @property
    def config(self) -> RunConfig:
        return self.model.cfg


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    cfg = RunConfig.from_dict(state["config"])
    if cfg.hash() != state["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    model = OccupancyModel(cfg)
    model.load_state_dict(state["model"])
    model.eval()
    return Checkpoint(model, state)


# -- evaluation ---------------------------------------------------------------

Predictor = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def model_predictor(model: OccupancyModel, dtype=torch.float32) -> Predictor:
    def predict(images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return model.predict_labels(images.to(dtype))
    return predict


def gt_predictor(images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Test hook: returns the ground truth itself."""
    return labels


def evaluate_split(predict: Predictor, data: SplitData, cfg: RunConfig, batch_size: int = 8,
                   csv_path: Optional[Union[str, Path]] = None) -> MetricReport:
    reports = []
    grid = cfg.grid
    for start in range(0, len(data), batch_size):
        idx = range(start, min(start + batch_size, len(data)))
        images, labels, _, _ = data.batch(idx)
        pred = predict(images, labels)
        for k, i in enumerate(idx):
            reports.append(evaluate_sample(VoxelGrid(grid, pred[k].numpy()), data.grids[i], cfg.num_classes,
                                           sample_id=str(data.seeds[i])))
    agg = aggregate(reports)
    if csv_path is not None:
        write_report_csv(csv_path, reports, agg)
    return agg


def evaluate(checkpoint: Union[str, Path, Checkpoint], split: str = "val", csv_path=None,
             data_dir=None) -> MetricReport:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    data = load_split(ckpt.config, split, data_dir)
    return evaluate_split(model_predictor(ckpt.model), data, ckpt.config, csv_path=csv_path)


# -- training -----------------------------------------------------------------

def _seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def train_step(model: OccupancyModel, batch, cfg: RunConfig) -> LossBreakdown:
    images, labels, pts, plabels = batch
    out = model(images)
    return compute_losses(
        out.o_f, labels, out.preds, pts, plabels, cfg.alpha, cfg.focal_gamma, cfg.focal_weight,
        cfg.supervise_init, cfg.lovasz_classes,
    )


@dataclass
class TrainResult:
    checkpoint_path: Path
    model: OccupancyModel
    history: List[Dict[str, float]]
    final: MetricReport


def train(cfg: RunConfig, out_dir: Union[str, Path], data_dir=None, train_data: Optional[SplitData] = None,
          val_data: Optional[SplitData] = None) -> TrainResult:
    """Optimise the full objective; writes ``train_log.csv`` and ``checkpoint.pt`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if train_data is None or val_data is None:
        build_dataset(cfg, data_dir)
        train_data = train_data or load_split(cfg, "train", data_dir)
        val_data = val_data or load_split(cfg, "val", data_dir)
    _seed_everything(cfg.seed)
    model = OccupancyModel(cfg)
    steps_per_epoch = math.ceil(len(train_data) / cfg.batch_size)
    opt, sched = make_optimizer(model, cfg, steps_per_epoch * cfg.epochs)
    order_gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    report = None
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        t0 = time.perf_counter()
        sums = {"l_vol": 0.0, "l_loc": 0.0, "l_cls": 0.0, "total": 0.0}
        order = torch.randperm(len(train_data), generator=order_gen).tolist()
        for start in range(0, len(order), cfg.batch_size):
            batch = train_data.batch(order[start:start + cfg.batch_size])
            losses = train_step(model, batch, cfg)
            if not torch.isfinite(losses.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {losses.as_floats()}")
            opt.zero_grad(set_to_none=True)
            losses.total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            for k, v in losses.as_floats().items():
                sums[k] += v
        row = {"epoch": epoch, **{k: v / steps_per_epoch for k, v in sums.items()},
               "lr": sched.get_last_lr()[0], "epoch_s": time.perf_counter() - t0}
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            model.eval()
            report = evaluate_split(model_predictor(model), val_data, cfg)
            row.update(val_miou=report.miou, val_fscore=report.fscore,
                       **{f"val_iou_{CLASS_NAMES[c]}": v for c, v in report.per_class_iou.items()})
        history.append(row)
        log.info("epoch %d %s", epoch, {k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})
    _write_history(out_dir / "train_log.csv", history)
    ckpt_path = out_dir / "checkpoint.pt"
    save_checkpoint(ckpt_path, model, opt, sched, cfg.epochs, {"val_miou": report.miou})
    return TrainResult(ckpt_path, model, history, report)


def _write_history(path: Path, history: List[Dict[str, float]]) -> None:
    keys = []
    for row in history:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(history)

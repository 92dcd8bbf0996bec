"""Dataset synthesis, on-disk caching and in-memory loading."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch

from ..geometry import VoxelGrid
from ..scenegen import (ManifestEntry, generate_scene, ground_truth_grid, occupied_point_set, read_images,
                        read_manifest, render, write_images, write_manifest)
from .config import RunConfig

log = logging.getLogger(__name__)

DATA_ENV = "BEPO_DATA_DIR"


def data_root(override: Optional[Union[str, Path]] = None) -> Path:
    root = override or os.environ.get(DATA_ENV) or Path.home() / ".cache" / "dualocc"
    return Path(root)


def dataset_dir(cfg: RunConfig, root: Optional[Union[str, Path]] = None) -> Path:
    return data_root(root) / f"scenes-{cfg.dataset_hash()}"


def split_seeds(cfg: RunConfig, split: str) -> List[int]:
    if split == "train":
        return list(range(cfg.num_train))
    if split == "val":
        return [cfg.val_seed_offset + k for k in range(cfg.num_val)]
    raise ValueError(f"unknown split {split!r}")


def _build_one(args) -> ManifestEntry:
    cfg, seed, split, out = args
    grid_path = out / f"{seed:06d}.occ"
    img_path = out / f"{seed:06d}.img"
    if not (grid_path.exists() and img_path.exists()):
        scene = generate_scene(seed, cfg.scene_config())
        ground_truth_grid(scene, cfg.grid).save(grid_path)
        write_images(img_path, render(scene, cfg.rig(), cfg.grid).images)
    return ManifestEntry(seed, split, grid_path.name, img_path.name)


def build_dataset(cfg: RunConfig, root: Optional[Union[str, Path]] = None, workers: int = 1) -> Path:
    """Synthesize (or reuse) every train/val scene and write ``manifest.txt``; returns its path."""
    out = dataset_dir(cfg, root)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, s, split, out) for split in ("train", "val") for s in split_seeds(cfg, split)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            entries = list(pool.map(_build_one, jobs, chunksize=8))
    else:
        entries = [_build_one(j) for j in jobs]
    manifest = out / "manifest.txt"
    write_manifest(manifest, entries)
    (out / "dataset.cfg").write_text(cfg.to_text())
    log.info("dataset with %d samples at %s", len(entries), out)
    return manifest


@dataclass
class SplitData:
    seeds: List[int]
    images: torch.Tensor  # (N, N_C, H, W, 3) float32
    labels: torch.Tensor  # (N, X, Y, Z) int64
    points: List[torch.Tensor]  # per sample (V_g, 3)
    point_labels: List[torch.Tensor]  # per sample (V_g,)
    grids: List[VoxelGrid]

    def __len__(self):
        return len(self.seeds)

    def batch(self, idx, dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor, List[torch.Tensor], List[torch.Tensor]]:
        idx = list(idx)
        return (self.images[idx].to(dtype), self.labels[idx],
                [self.points[i].to(dtype) for i in idx], [self.point_labels[i] for i in idx])


def load_split(cfg: RunConfig, split: str, root: Optional[Union[str, Path]] = None) -> SplitData:
    out = dataset_dir(cfg, root)
    manifest = out / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}; run `dualocc dataset build` first")
    entries = [e for e in read_manifest(manifest) if e.split == split]
    imgs, labels, pts, plabels, grids = [], [], [], [], []
    for e in entries:
        grid = VoxelGrid.load(out / e.grid_path)
        ps = occupied_point_set(grid)
        grids.append(grid)
        imgs.append(read_images(out / e.image_path))
        labels.append(grid.payload)
        pts.append(torch.from_numpy(ps.locations))
        plabels.append(torch.from_numpy(ps.labels))
    return SplitData([e.seed for e in entries], torch.from_numpy(np.stack(imgs)),
                     torch.from_numpy(np.stack(labels)), pts, plabels, grids)

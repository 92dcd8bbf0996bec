"""BEV branch: lift-splat view transform, BEV encoder and occupancy head.

BEV tensors are channels-first ``(B, C_b, X, Y)``: dim 2 runs along ego x and
dim 3 along ego y, matching the first two occupancy grid axes. Occupancy
volumes are channels-last ``(B, X, Y, Z, C + 1)`` with channel 0 = free.
"""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import CameraModel, GridSpec, frustum_points, voxel_indices


def default_depth_bins(num_bins: int = 16, near: float = 0.4, far: float = 12.8) -> np.ndarray:
    return np.linspace(near, far, num_bins)


def splat_geometry(rig: Sequence[CameraModel], feat_h: int, feat_w: int, depth_bins: Sequence[float],
                   grid: GridSpec) -> Tuple[torch.Tensor, torch.Tensor]:
    """BEV cell index and in-range mask for every frustum point.

    Both outputs have shape ``(N_C, D, feat_h, feat_w)``; the index is flat
    over ``X * Y``. Points outside the grid in any axis are masked out.
    """
    pts = np.stack([frustum_points(cam, feat_h, feat_w, depth_bins) for cam in rig])  # N,h,w,D,3
    pts = torch.from_numpy(pts).permute(0, 3, 1, 2, 4)  # N,D,h,w,3
    flat, valid = voxel_indices(grid, pts)
    cell = flat // grid.dims[2]
    return cell, valid


def lift_splat(context: torch.Tensor, depth_prob: torch.Tensor, cell: torch.Tensor, valid: torch.Tensor,
               bev_hw: Tuple[int, int]) -> torch.Tensor:
    """Sum ``context * depth_prob`` of every frustum point into its BEV pillar.

    Args:
        context: ``(B, N_C, C, h, w)`` per-pixel features.
        depth_prob: ``(B, N_C, D, h, w)`` per-pixel depth distribution.
        cell: ``(N_C, D, h, w)`` flat BEV index per frustum point.
        valid: ``(N_C, D, h, w)`` in-range mask.
        bev_hw: ``(X, Y)``.

    Returns:
        ``(B, C, X, Y)`` BEV features; cells that receive nothing are zero.
    """
    b, n, c, h, w = context.shape
    n_cells = bev_hw[0] * bev_hw[1]
    n_pix = n * h * w
    # only in-range frustum points: gather pixel features, weight by depth probability, add into cells
    cam_i, bin_i, row_i, col_i = valid.nonzero(as_tuple=True)
    pix = (cam_i * h + row_i) * w + col_i
    target = cell[cam_i, bin_i, row_i, col_i]
    weights = depth_prob[:, cam_i, bin_i, row_i, col_i]  # B, nnz
    offs = torch.arange(b, device=context.device)[:, None]
    rows = (offs * n_cells + target).reshape(-1)
    cols = (offs * n_pix + pix).reshape(-1)
    ctx = context.permute(0, 1, 3, 4, 2).reshape(b * n_pix, c)
    lifted = weights.reshape(-1, 1) * ctx.index_select(0, cols)
    out = ctx.new_zeros(b * n_cells, c).index_add(0, rows, lifted)
    return out.view(b, bev_hw[0], bev_hw[1], c).permute(0, 3, 1, 2)


class ViewTransform(nn.Module):
    """Lift-splat: per-pixel depth softmax times projected features, pillar-pooled into BEV."""

    def __init__(self, rig: Sequence[CameraModel], grid: GridSpec, in_channels: int, bev_channels: int,
                 feat_stride: int, depth_bins: Sequence[float] = tuple(default_depth_bins())):
        super().__init__()
        self.grid = grid
        self.depth_bins = tuple(float(d) for d in depth_bins)
        self.feat_stride = feat_stride
        feat_h = rig[0].image_h // feat_stride
        feat_w = rig[0].image_w // feat_stride
        cell, valid = splat_geometry(rig, feat_h, feat_w, self.depth_bins, grid)
        self.register_buffer("cell", cell, persistent=False)
        self.register_buffer("valid", valid, persistent=False)
        num_bins = len(self.depth_bins)
        self.depth_net = nn.Sequential(
            nn.Conv2d(in_channels, in_channels, 3, padding=1), nn.ReLU(), nn.Conv2d(in_channels, num_bins, 1)
        )
        # bias-free so the transform stays linear in the features for a fixed depth distribution
        self.context = nn.Conv2d(in_channels, bev_channels, 1, bias=False)

    def depth_distribution(self, feats: torch.Tensor) -> torch.Tensor:
        b, n = feats.shape[:2]
        logits = self.depth_net(feats.flatten(0, 1))
        return logits.softmax(dim=1).unflatten(0, (b, n))

    def forward(self, feats: torch.Tensor, depth_prob: torch.Tensor = None) -> torch.Tensor:
        """``feats``: ``(B, N_C, C_f, h, w)`` at ``feat_stride``; returns ``(B, C_b, X, Y)``."""
        b, n = feats.shape[:2]
        if depth_prob is None:
            depth_prob = self.depth_distribution(feats)
        ctx = self.context(feats.flatten(0, 1)).unflatten(0, (b, n))
        return lift_splat(ctx, depth_prob, self.cell, self.valid, self.grid.dims[:2])


class BevEncoder(nn.Module):
    """Same-resolution residual conv stack: ``x <- x + conv(relu(x))`` per layer."""

    def __init__(self, channels: int, num_layers: int = 3):
        super().__init__()
        self.layers = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(num_layers))

    def zero_init(self) -> None:
        for conv in self.layers:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, bev: torch.Tensor) -> torch.Tensor:
        for conv in self.layers:
            bev = bev + conv(F.relu(bev))
        return bev


class OccHead(nn.Module):
    """Per-cell linear map ``C_b -> Z * (C + 1)``; height is decoded from channels."""

    def __init__(self, bev_channels: int, z_dim: int, num_classes: int):
        super().__init__()
        self.z_dim = z_dim
        self.num_out = num_classes + 1
        self.proj = nn.Conv2d(bev_channels, z_dim * self.num_out, 1)

    def forward(self, bev: torch.Tensor) -> torch.Tensor:
        b, _, x, y = bev.shape
        out = self.proj(bev).view(b, self.z_dim, self.num_out, x, y)
        return out.permute(0, 3, 4, 1, 2)

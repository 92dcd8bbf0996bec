"""Full dual-branch occupancy model assembled from the branch modules."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, Optional

import torch
from torch import nn

from ..backbone import Backbone
from ..bev_branch import BevEncoder, OccHead, ViewTransform, default_depth_bins
from ..bridge import BevPointCrossAttention, fuse_volumes
from ..geometry import voxelize
from ..point_branch import PointDecoder, PointPredictions
from .config import RunConfig


@dataclass
class ForwardOutput:
    o_f: torch.Tensor  # (B, X, Y, Z, C + 1)
    o_bev: torch.Tensor
    o_p: torch.Tensor
    preds: Optional[PointPredictions]
    diagnostics: Dict[str, float] = field(default_factory=dict)


class OccupancyModel(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.grid = cfg.grid
        self.rig = cfg.rig()
        torch.manual_seed(cfg.seed)
        self.backbone = Backbone(cfg.backbone_width, cfg.backbone_stages, cfg.backbone_scales)
        if cfg.bev_branch:
            bins = default_depth_bins(cfg.depth_bins, cfg.depth_near, cfg.depth_far)
            self.view_transform = ViewTransform(self.rig, self.grid, cfg.backbone_width, cfg.bev_channels,
                                                2 ** cfg.bev_scale, bins)
            self.bev_encoder = BevEncoder(cfg.bev_channels, cfg.bev_layers)
            self.occ_head = OccHead(cfg.bev_channels, self.grid.dims[2], cfg.num_classes)
        if cfg.point_branch:
            self.point_decoder = PointDecoder(
                self.grid, cfg.num_classes, cfg.num_queries, cfg.query_dim, cfg.backbone_width, cfg.schedule,
                cfg.init_points, cfg.num_samples, len(cfg.backbone_scales), cfg.query_heads, seed=cfg.seed,
            )
        if cfg.bev_branch and cfg.point_branch and cfg.cross_attention:
            self.cross_attn = BevPointCrossAttention(cfg.bev_channels, cfg.query_dim, cfg.bev_channels,
                                                     cfg.ca_heads, cfg.residual_ca)

    def volume_shape(self, batch: int):
        return (batch, *self.grid.dims, self.cfg.num_classes + 1)

    def forward(self, images: torch.Tensor) -> ForwardOutput:
        """``images``: ``(B, N_C, H, W, 3)`` in ``[0, 1]``."""
        cfg = self.cfg
        diag = {}
        t0 = time.perf_counter()
        feats = self.backbone(images.permute(0, 1, 4, 2, 3))
        diag["backbone_ms"] = 1e3 * (time.perf_counter() - t0)
        b = images.shape[0]
        zeros = images.new_zeros(self.volume_shape(b))

        preds = None
        if cfg.point_branch:
            t = time.perf_counter()
            preds = self.point_decoder(feats, self.rig)
            diag["points_ms"] = 1e3 * (time.perf_counter() - t)

        o_bev = zeros
        if cfg.bev_branch:
            t = time.perf_counter()
            bev = self.view_transform(feats[cfg.bev_scale])
            use_ca = preds is not None and cfg.cross_attention
            if use_ca and cfg.ca_position == "pre_encoder":
                bev = self.cross_attn(bev, preds.final_features)
            bev = self.bev_encoder(bev)
            if use_ca and cfg.ca_position == "post_encoder":
                bev = self.cross_attn(bev, preds.final_features)
            o_bev = self.occ_head(bev)
            diag["bev_ms"] = 1e3 * (time.perf_counter() - t)

        o_p = zeros
        if preds is not None:
            o_p = voxelize(preds.points[-1], preds.class_scores[-1].softmax(dim=-1), self.grid)
        o_f = fuse_volumes(o_bev, o_p)
        diag["total_ms"] = 1e3 * (time.perf_counter() - t0)
        return ForwardOutput(o_f, o_bev, o_p, preds, diag)

    @torch.no_grad()
    def predict_labels(self, images: torch.Tensor) -> torch.Tensor:
        """Argmax decode of the fused logits: ``(B, X, Y, Z)`` integer labels."""
        return self.forward(images).o_f.argmax(dim=-1)

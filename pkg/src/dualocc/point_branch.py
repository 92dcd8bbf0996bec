"""Sparse points branch: learnable queries refined by point-sampling decoder stages.

Each query owns ``M_i`` points at stage ``i``. A stage samples image
features around the query's mean point, mixes them into the query
(adaptive channel/point mixing), runs self-attention across queries, then
emits per-point offsets and class logits. Parent points are repeated
``M_i / M_{i-1}`` times before the offsets are added.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import CameraModel, GridSpec, project_points


class ScheduleError(ValueError):
    """Invalid coarse-to-fine points-per-query schedule."""


@dataclass
class QueryState:
    features: torch.Tensor  # (B, Q, C_q)
    points: torch.Tensor  # (B, Q, M_i, 3)
    class_scores: Optional[torch.Tensor]  # (B, Q, M_i, C) logits; None at stage 0
    stage: int = 0


@dataclass
class PointPredictions:
    points: List[torch.Tensor]  # per stage (B, Q * M_i, 3)
    class_scores: List[torch.Tensor]  # per stage (B, Q * M_i, C)
    final_features: torch.Tensor  # (B, Q, C_q)
    init_points: Optional[torch.Tensor] = None  # (B, Q * M_0, 3)

    def __len__(self):
        return len(self.points)


def check_schedule(m0: int, schedule: Sequence[int]) -> List[int]:
    """Validate ``M_1..M_l`` against ``M_0`` and return the expansion factors."""
    if len(schedule) < 1:
        raise ScheduleError("need at least one decoder stage")
    factors, prev = [], m0
    for i, m in enumerate(schedule, start=1):
        if m < prev:
            raise ScheduleError(f"points-per-query must not shrink: M_{i - 1}={prev} > M_{i}={m}")
        if m % prev:
            raise ScheduleError(f"M_{i}={m} is not an integer multiple of M_{i - 1}={prev}")
        factors.append(m // prev)
        prev = m
    return factors


def init_queries(seed: int, num_queries: int, query_dim: int, grid: GridSpec, points_per_query: int = 1
                 ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Initial query features ``(Q, C_q)`` and points ``(Q, M_0, 3)`` uniform over the grid."""
    if num_queries < 1:
        raise ValueError("need at least one query")
    gen = torch.Generator().manual_seed(seed)
    feats = torch.randn(num_queries, query_dim, generator=gen) / math.sqrt(query_dim)
    lo = torch.tensor(grid.origin, dtype=feats.dtype)
    hi = torch.tensor(grid.upper, dtype=feats.dtype)
    u = torch.rand(num_queries, points_per_query, 3, generator=gen)
    points = lo + u * (hi - lo)
    # keep strictly inside the half-open range
    points = torch.minimum(points, hi - 1e-4 * grid.voxel_size)
    return feats, points


def bilinear_sample(fmap: torch.Tensor, u: torch.Tensor, v: torch.Tensor, image_hw: Tuple[int, int]) -> torch.Tensor:
    """Sample ``fmap`` ``(B, C, h, w)`` at image pixel coords ``u, v`` ``(B, ...)``.

    Feature cell ``(r, c)`` has its centre at image pixel
    ``((c + 0.5) * W / w, (r + 0.5) * H / h)``. Returns ``(B, ..., C)``.
    """
    b = fmap.shape[0]
    shape = u.shape
    gx = 2.0 * u / image_hw[1] - 1.0
    gy = 2.0 * v / image_hw[0] - 1.0
    grid = torch.stack([gx, gy], dim=-1).reshape(b, 1, -1, 2)
    out = F.grid_sample(fmap, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out[:, :, 0].transpose(1, 2).reshape(*shape, fmap.shape[1])


def sample_image_features(locations: torch.Tensor, feats: Dict[int, torch.Tensor], rig: Sequence[CameraModel]
                          ) -> torch.Tensor:
    """Bilinear image features at ego ``locations`` ``(B, Q, S, 3)``.

    Every location is projected into every camera; out-of-view projections
    contribute nothing and the visible ones are averaged. Returns
    ``(B, Q, S * n_scales, C_f)``, scales concatenated in ascending order.
    """
    image_hw = (rig[0].image_h, rig[0].image_w)
    out = []
    for s in sorted(feats):
        fmap = feats[s]  # B, N_C, C, h, w
        acc = None
        count = torch.zeros(locations.shape[:-1], dtype=locations.dtype, device=locations.device)
        for n, cam in enumerate(rig):
            u, v, _, ok = project_points(cam, locations)
            okf = ok.to(locations.dtype)
            sampled = bilinear_sample(fmap[:, n], u, v, image_hw) * okf[..., None]
            acc = sampled if acc is None else acc + sampled
            count = count + okf
        out.append(acc / count.clamp(min=1.0)[..., None])
    return torch.cat(out, dim=2)


class PointSampler(nn.Module):
    """Per-query sampling offsets around the query's mean point."""

    def __init__(self, query_dim: int, num_samples: int = 4, init_spread: float = 0.5):
        super().__init__()
        self.num_samples = num_samples
        self.offsets = nn.Linear(query_dim, num_samples * 3)
        nn.init.normal_(self.offsets.weight, std=0.01)
        nn.init.uniform_(self.offsets.bias, -init_spread, init_spread)

    def locations(self, query: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        centre = points.mean(dim=2)
        off = self.offsets(query).unflatten(-1, (self.num_samples, 3))
        return centre.unsqueeze(2) + off

    def forward(self, query, points, feats, rig):
        return sample_image_features(self.locations(query, points), feats, rig)


class AdaptiveMixing(nn.Module):
    """Query-conditioned channel mixing then point mixing, projected back residually."""

    def __init__(self, query_dim: int, feat_dim: int, num_points: int):
        super().__init__()
        self.feat_dim = feat_dim
        self.num_points = num_points
        self.generator = nn.Linear(query_dim, feat_dim * feat_dim + num_points * num_points)
        self.out_proj = nn.Linear(num_points * feat_dim, query_dim)
        nn.init.xavier_uniform_(self.generator.weight, gain=1.0 / math.sqrt(feat_dim))
        nn.init.zeros_(self.generator.bias)

    def forward(self, query: torch.Tensor, sampled: torch.Tensor) -> torch.Tensor:
        c, p = self.feat_dim, self.num_points
        params = self.generator(query)
        channel_mix = params[..., : c * c].unflatten(-1, (c, c))
        point_mix = params[..., c * c:].unflatten(-1, (p, p))
        x = F.relu(sampled @ channel_mix)  # (..., P, C_f)
        x = F.relu(point_mix @ x)
        return query + self.out_proj(x.flatten(-2))


class QuerySelfAttention(nn.Module):
    """Post-norm transformer block: multi-head self-attention over queries plus a feed-forward layer."""

    def __init__(self, dim: int, num_heads: int = 4, ffn_mult: int = 2):
        super().__init__()
        if dim % num_heads:
            raise ValueError("query dim must be divisible by the head count")
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.ReLU(), nn.Linear(ffn_mult * dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        h = self.num_heads
        q = self.q_proj(x).unflatten(-1, (h, -1)).transpose(-3, -2)
        k = self.k_proj(x).unflatten(-1, (h, -1)).transpose(-3, -2)
        v = self.v_proj(x).unflatten(-1, (h, -1)).transpose(-3, -2)
        w = (q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])).softmax(dim=-1)
        return self.out_proj((w @ v).transpose(-3, -2).flatten(-2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attend(x))
        return self.norm2(x + self.ffn(x))


class DecoderStage(nn.Module):
    def __init__(self, query_dim: int, feat_dim: int, num_classes: int, points_per_query: int,
                 expansion: int, grid: GridSpec, num_samples: int = 4, num_scales: int = 2,
                 num_heads: int = 4, offset_scale: float = 1.0):
        super().__init__()
        self.points_per_query = points_per_query
        self.expansion = expansion
        self.num_classes = num_classes
        self.offset_scale = offset_scale
        extent = grid.upper - np.asarray(grid.origin)
        self.register_buffer("grid_lo", torch.tensor(grid.origin, dtype=torch.float32), persistent=False)
        self.register_buffer("grid_extent", torch.tensor(extent, dtype=torch.float32), persistent=False)
        self.pos_embed = nn.Sequential(nn.Linear(3, query_dim), nn.ReLU(), nn.Linear(query_dim, query_dim))
        self.sampler = PointSampler(query_dim, num_samples)
        self.mixing = AdaptiveMixing(query_dim, feat_dim, num_samples * num_scales)
        self.mix_norm = nn.LayerNorm(query_dim)
        self.self_attn = QuerySelfAttention(query_dim, num_heads)
        self.offset_head = nn.Linear(query_dim, points_per_query * 3)
        self.class_head = nn.Linear(query_dim, points_per_query * num_classes)
        nn.init.normal_(self.offset_head.weight, std=0.02)
        nn.init.zeros_(self.offset_head.bias)

    def forward(self, state: QueryState, feats: Dict[int, torch.Tensor], rig: Sequence[CameraModel]) -> QueryState:
        parents = state.points
        centre = (parents.mean(dim=2) - self.grid_lo) / self.grid_extent
        q = state.features + self.pos_embed(centre)
        sampled = self.sampler(q, parents, feats, rig)
        q = self.mix_norm(self.mixing(q, sampled))
        q = self.self_attn(q)
        delta = self.offset_head(q).unflatten(-1, (self.points_per_query, 3)) * self.offset_scale
        points = parents.repeat_interleave(self.expansion, dim=2) + delta
        scores = self.class_head(q).unflatten(-1, (self.points_per_query, self.num_classes))
        return QueryState(q, points, scores, state.stage + 1)


class PointDecoder(nn.Module):
    """Learnable queries plus ``l`` decoder stages following the ``M`` schedule."""

    def __init__(self, grid: GridSpec, num_classes: int, num_queries: int = 64, query_dim: int = 64,
                 feat_dim: int = 32, schedule: Sequence[int] = (1, 2, 4), init_points_per_query: int = 1,
                 num_samples: int = 4, num_scales: int = 2, num_heads: int = 4, seed: int = 0):
        super().__init__()
        factors = check_schedule(init_points_per_query, schedule)
        self.schedule = tuple(schedule)
        feats, points = init_queries(seed, num_queries, query_dim, grid, init_points_per_query)
        self.query_features = nn.Parameter(feats)
        self.query_points = nn.Parameter(points)
        self.stages = nn.ModuleList(
            DecoderStage(query_dim, feat_dim, num_classes, m, r, grid, num_samples, num_scales, num_heads)
            for m, r in zip(schedule, factors)
        )

    def initial_state(self, batch: int) -> QueryState:
        return QueryState(
            self.query_features.unsqueeze(0).expand(batch, -1, -1),
            self.query_points.unsqueeze(0).expand(batch, -1, -1, -1),
            None,
            0,
        )

    def forward(self, feats: Dict[int, torch.Tensor], rig: Sequence[CameraModel],
                state: Optional[QueryState] = None) -> PointPredictions:
        if state is None:
            state = self.initial_state(next(iter(feats.values())).shape[0])
        init = state.points.flatten(1, 2)
        pts, scores = [], []
        for stage in self.stages:
            state = stage(state, feats, rig)
            pts.append(state.points.flatten(1, 2))
            scores.append(state.class_scores.flatten(1, 2))
        return PointPredictions(pts, scores, state.features, init)

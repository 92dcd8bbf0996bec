"""Small multi-scale image feature extractor shared by both branches."""
from __future__ import annotations

from typing import Dict, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .geometry import ContractError


class Backbone(nn.Module):
    """Stack of stride-2 conv stages with a light top-down pathway.

    Args:
        width: channel count C_f of every exposed scale.
        num_stages: number of stride-2 stages; stage ``s`` has stride ``2**s``.
        scales: which strides (as powers of two) to expose.

    ``forward`` takes ``(B, N_C, 3, H, W)`` images and returns a dict
    ``{s: (B, N_C, C_f, H / 2**s, W / 2**s)}``. Cameras are folded into the
    batch, so every camera sees the same weights.
    """

    def __init__(self, width: int = 32, num_stages: int = 4, scales: Sequence[int] = (2, 3)):
        super().__init__()
        if not scales or max(scales) > num_stages or min(scales) < 1:
            raise ContractError(f"scales {scales} must be a non-empty subset of 1..{num_stages}")
        self.scales = tuple(sorted(scales))
        self.num_stages = num_stages
        self.width = width
        self.stages = nn.ModuleList(
            nn.Conv2d(3 if i == 0 else width, width, 3, stride=2, padding=1) for i in range(num_stages)
        )
        # 1x1 laterals only for the levels the top-down path visits
        self.lateral = nn.ModuleDict(
            {str(s): nn.Conv2d(width, width, 1) for s in range(min(self.scales), num_stages + 1)})

    def forward(self, images: torch.Tensor) -> Dict[int, torch.Tensor]:
        if not torch.isfinite(images).all():
            raise ContractError("backbone input contains non-finite values")
        b, n = images.shape[:2]
        x = images.flatten(0, 1)
        feats = []
        for conv in self.stages:
            x = F.relu(conv(x))
            feats.append(x)
        out = {}
        top = None
        for s in range(self.num_stages, min(self.scales) - 1, -1):
            cur = self.lateral[str(s)](feats[s - 1])
            if top is not None:
                cur = cur + F.interpolate(top, size=cur.shape[-2:], mode="nearest")
            top = cur
            if s in self.scales:
                out[s] = cur.unflatten(0, (b, n))
        return out

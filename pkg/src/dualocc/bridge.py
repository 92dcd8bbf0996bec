"""Cross-attention from BEV cells to point-query features, and volume fusion."""
from __future__ import annotations

import math

import torch
from torch import nn

from .geometry import ContractError


class BevPointCrossAttention(nn.Module):
    """BEV cells attend to the final point-branch queries.

    The queries are first mapped ``C_q -> C_b`` by ``pi``; BEV features give
    the attention queries, projected point features the keys and values.
    All projections are bias-free, so zeroing ``v_proj`` (or ``out_proj``)
    makes the residual variant an exact identity.
    """

    def __init__(self, bev_dim: int, query_dim: int, attn_dim: int = None, num_heads: int = 4,
                 residual: bool = True):
        super().__init__()
        attn_dim = attn_dim or bev_dim
        if attn_dim % num_heads:
            raise ValueError("attention dim must be divisible by the head count")
        self.num_heads = num_heads
        self.residual = residual
        self.pi = nn.Linear(query_dim, bev_dim, bias=False)
        self.q_proj = nn.Linear(bev_dim, attn_dim, bias=False)
        self.k_proj = nn.Linear(bev_dim, attn_dim, bias=False)
        self.v_proj = nn.Linear(bev_dim, attn_dim, bias=False)
        self.out_proj = nn.Linear(attn_dim, bev_dim, bias=False)

    def attention_weights(self, bev: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        """Softmax weights ``(B, heads, X*Y, Q)``."""
        q, k, _ = self._qkv(bev, queries)
        return (q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])).softmax(dim=-1)

    def _qkv(self, bev, queries):
        if queries.shape[1] == 0:
            raise ContractError("cross-attention needs at least one point query")
        h = self.num_heads
        cells = bev.flatten(2).transpose(1, 2)  # B, XY, C_b
        keys_in = self.pi(queries)
        q = self.q_proj(cells).unflatten(-1, (h, -1)).transpose(1, 2)
        k = self.k_proj(keys_in).unflatten(-1, (h, -1)).transpose(1, 2)
        v = self.v_proj(keys_in).unflatten(-1, (h, -1)).transpose(1, 2)
        return q, k, v

    def forward(self, bev: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        """``bev``: ``(B, C_b, X, Y)``; ``queries``: ``(B, Q, C_q)``."""
        q, k, v = self._qkv(bev, queries)
        w = (q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])).softmax(dim=-1)
        attn = self.out_proj((w @ v).transpose(1, 2).flatten(2))  # B, XY, C_b
        attn = attn.transpose(1, 2).reshape(bev.shape)
        return bev + attn if self.residual else attn


def fuse_volumes(o_bev: torch.Tensor, o_p: torch.Tensor) -> torch.Tensor:
    """Element-wise sum of two occupancy volumes of identical shape."""
    if o_bev.shape != o_p.shape:
        raise ContractError(f"cannot fuse volumes of shapes {tuple(o_bev.shape)} and {tuple(o_p.shape)}")
    return o_bev + o_p

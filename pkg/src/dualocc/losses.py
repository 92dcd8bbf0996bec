"""Training losses: volume CE + Lovasz-softmax, Chamfer, nearest-label focal, weighted total."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F

from .geometry import ContractError
from .point_branch import PointPredictions


@dataclass
class LossBreakdown:
    l_vol: torch.Tensor
    l_loc: torch.Tensor
    l_cls: torch.Tensor
    total: torch.Tensor
    alpha: float

    def as_floats(self) -> Dict[str, float]:
        return {
            "l_vol": float(self.l_vol.detach()),
            "l_loc": float(self.l_loc.detach()),
            "l_cls": float(self.l_cls.detach()),
            "total": float(self.total.detach()),
        }


def lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    """Jaccard-loss increments along errors sorted in decreasing order."""
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1.0 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax_flat(probs: torch.Tensor, labels: torch.Tensor, classes: str = "present") -> torch.Tensor:
    """Lovasz-softmax over ``probs`` ``(P, K)`` and integer ``labels`` ``(P,)``.

    ``classes="present"`` averages over classes that occur in ``labels``;
    ``"all"`` averages over every channel.
    """
    losses = []
    for c in range(probs.shape[1]):
        fg = (labels == c).to(probs.dtype)
        if classes == "present" and fg.sum() == 0:
            continue
        errors = (fg - probs[:, c]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True, stable=True)
        losses.append(torch.dot(errors_sorted, lovasz_grad(fg[perm])))
    if not losses:
        return probs.sum() * 0.0
    return torch.stack(losses).mean()


def volume_loss(logits: torch.Tensor, labels: torch.Tensor, lovasz_classes: str = "present") -> torch.Tensor:
    """Mean voxel cross-entropy plus Lovasz-softmax; channel 0 of ``logits`` is free space."""
    if logits.shape[:-1] != labels.shape:
        raise ContractError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    flat = logits.reshape(-1, logits.shape[-1])
    lbl = labels.reshape(-1).long()
    ce = F.cross_entropy(flat, lbl)
    return ce + lovasz_softmax_flat(flat.softmax(dim=-1), lbl, lovasz_classes)


def pairwise_sq_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def chamfer(p: torch.Tensor, p_g: torch.Tensor) -> torch.Tensor:
    """Sum of the two directional mean squared nearest-neighbour distances."""
    if len(p) == 0 or len(p_g) == 0:
        raise ContractError("chamfer distance is undefined for an empty point set")
    d = pairwise_sq_dist(p, p_g)
    return d.min(dim=1).values.mean() + d.min(dim=0).values.mean()


def location_loss(stage_points: Sequence[torch.Tensor], p_g: torch.Tensor,
                  init_points: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Chamfer summed over decoder stages (plus the initial set when given)."""
    if len(stage_points) < 1:
        raise ContractError("need at least one supervised stage")
    sets = list(stage_points) if init_points is None else [init_points, *stage_points]
    return torch.stack([chamfer(p, p_g) for p in sets]).sum()


def assign_labels(pred_points: torch.Tensor, gt_points: torch.Tensor, gt_labels: torch.Tensor) -> torch.Tensor:
    """Label of the Euclidean-nearest GT point; ties go to the lowest GT index."""
    if len(gt_points) == 0:
        raise ContractError("label assignment needs a non-empty ground-truth set")
    idx = pairwise_sq_dist(pred_points.detach(), gt_points).argmin(dim=1)
    return gt_labels[idx]


def focal_class_loss(scores: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0,
                     weight: float = 0.25) -> torch.Tensor:
    """Softmax focal loss; ``labels`` are semantic classes in ``[1, C]``."""
    target = labels.long() - 1
    if target.numel() and (target.min() < 0 or target.max() >= scores.shape[-1]):
        raise ContractError("focal loss labels must lie in [1, C]")
    logp = scores.log_softmax(dim=-1).gather(-1, target[:, None]).squeeze(-1)
    pt = logp.exp()
    return (-weight * (1.0 - pt) ** gamma * logp).mean()


def total_loss(l_vol: torch.Tensor, l_loc: torch.Tensor, l_cls: torch.Tensor, alpha: float = 0.1) -> LossBreakdown:
    l_vol, l_loc, l_cls = (torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x
                           for x in (l_vol, l_loc, l_cls))
    return LossBreakdown(l_vol, l_loc, l_cls, l_vol + alpha * (l_loc + l_cls), alpha)


def _padded(sets: Sequence[torch.Tensor], fill: float = 0.0):
    m = max(len(x) for x in sets)
    out = sets[0].new_full((len(sets), m, *sets[0].shape[1:]), fill)
    mask = torch.zeros(len(sets), m, dtype=torch.bool, device=sets[0].device)
    for i, x in enumerate(sets):
        out[i, : len(x)] = x
        mask[i, : len(x)] = True
    return out, mask


def batched_point_losses(stage_points: Sequence[torch.Tensor], stage_scores: Sequence[torch.Tensor],
                         gt_points: List[torch.Tensor], gt_point_labels: List[torch.Tensor],
                         gamma: float = 2.0, focal_weight: float = 0.25,
                         init_points: Optional[torch.Tensor] = None):
    """Per-sample ``(l_loc, l_cls)`` for a batch, with ground-truth sets padded to a common size.

    Equivalent to looping :func:`location_loss`, :func:`assign_labels` and
    :func:`focal_class_loss` over samples; one distance matrix per stage
    serves both the Chamfer term and the label assignment. Returns two
    ``(B,)`` tensors.
    """
    if any(len(g) == 0 for g in gt_points):
        raise ContractError("point losses need a non-empty ground-truth set per sample")
    g, mask = _padded(gt_points)
    lab, _ = _padded(gt_point_labels)
    n_valid = mask.sum(1).to(g.dtype)
    inf = torch.finfo(g.dtype).max
    g_sq = (g * g).sum(-1)
    l_loc = g.new_zeros(len(gt_points))
    l_cls = g.new_zeros(len(gt_points))
    sets = [(p, None) for p in ([init_points] if init_points is not None else [])]
    sets += list(zip(stage_points, stage_scores))
    for pts, scores in sets:
        d = (pts * pts).sum(-1)[:, :, None] + g_sq[:, None, :] - 2.0 * pts @ g.transpose(1, 2)
        d = d.clamp(min=0.0).masked_fill(~mask[:, None, :], inf)
        min_pg, nearest = d.min(dim=2)
        min_gp = d.min(dim=1).values.masked_fill(~mask, 0.0)
        l_loc = l_loc + min_pg.mean(1) + min_gp.sum(1) / n_valid
        if scores is None:
            continue
        target = lab.gather(1, nearest) - 1
        logp = scores.log_softmax(-1).gather(-1, target[..., None]).squeeze(-1)
        l_cls = l_cls + (-focal_weight * (1.0 - logp.exp()) ** gamma * logp).mean(1)
    return l_loc, l_cls


def compute_losses(o_f: Optional[torch.Tensor], gt_labels: torch.Tensor, preds: Optional[PointPredictions],
                   gt_points: List[torch.Tensor], gt_point_labels: List[torch.Tensor], alpha: float = 0.1,
                   gamma: float = 2.0, focal_weight: float = 0.25, supervise_init: bool = False,
                   lovasz_classes: str = "present") -> LossBreakdown:
    """Full objective over a batch; point terms are averaged over samples."""
    dtype = o_f.dtype if o_f is not None else torch.float32
    zero = torch.zeros((), dtype=dtype, device=gt_labels.device)
    l_vol = volume_loss(o_f, gt_labels, lovasz_classes) if o_f is not None else zero
    if preds is None:
        return total_loss(l_vol, zero, zero, alpha)
    init = preds.init_points if supervise_init else None
    l_loc, l_cls = batched_point_losses(preds.points, preds.class_scores, gt_points, gt_point_labels,
                                        gamma, focal_weight, init)
    return total_loss(l_vol, l_loc.mean(), l_cls.mean(), alpha)

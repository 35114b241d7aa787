"""The composite training loss: focal classification, IoU regression,
center-ness BCE, and per-stage keypoint MSE.

Reduction conventions: the detection terms are normalized by the number
of positive locations counted over the whole batch (floored at 1 so an
all-background batch stays finite); the keypoint term is a per-sample
mean averaged over the batch, summed across hourglass stages, and zeroed
for samples without any present keypoint. total = cls + lam * reg +
cen + kpt with lam = 1 by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NonFiniteLogit, NonPositiveDistance, ShapeMismatch
from .network import NetworkOutputs

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class LossBreakdown:
    l_cls: float
    l_reg: float
    l_cen: float
    l_kpt: float
    total: float
    n_pos: int

    def to_record(self) -> dict:
        return {
            "l_cls": self.l_cls, "l_reg": self.l_reg, "l_cen": self.l_cen,
            "l_kpt": self.l_kpt, "total": self.total, "n_pos": self.n_pos,
        }


def focal_loss(cls_logits: list[torch.Tensor], class_maps: list[torch.Tensor],
               n_pos: int, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Sigmoid focal loss summed over every location and class, / max(n_pos, 1).

    cls_logits: per-level (B, C, H, W); class_maps: per-level (B, H, W) int64
    with -1 = background (all-zero one-vs-all target row).
    """
    num_classes = cls_logits[0].shape[1]
    flat_logits = torch.cat([x.permute(0, 2, 3, 1).reshape(-1, num_classes) for x in cls_logits])
    flat_labels = torch.cat([m.reshape(-1) for m in class_maps])
    if not torch.isfinite(flat_logits).all():
        raise NonFiniteLogit("classification logits contain non-finite values")

    targets = torch.zeros_like(flat_logits)
    pos = flat_labels >= 0
    targets[pos, flat_labels[pos]] = 1.0

    p = torch.sigmoid(flat_logits)
    ce = F.binary_cross_entropy_with_logits(flat_logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    loss = alpha_t * (1 - p_t) ** gamma * ce
    return loss.sum() / max(n_pos, 1)


def iou_loss(reg_pred: torch.Tensor, reg_target: torch.Tensor, n_pos: int) -> torch.Tensor:
    """-ln IoU between boxes rebuilt around the same location, summed / n_pos.

    Both arguments are (N, 4) positive (l, t, r, b) side distances.
    """
    if reg_pred.numel() == 0:
        return reg_pred.sum()
    if (reg_pred <= 0).any() or (reg_target <= 0).any():
        raise NonPositiveDistance("side distances must be strictly positive")
    lp, tp, rp, bp = reg_pred.unbind(dim=-1)
    lt, tt, rt, bt = reg_target.unbind(dim=-1)
    area_p = (lp + rp) * (tp + bp)
    area_t = (lt + rt) * (tt + bt)
    iw = torch.minimum(lp, lt) + torch.minimum(rp, rt)
    ih = torch.minimum(tp, tt) + torch.minimum(bp, bt)
    inter = iw * ih
    iou = inter / (area_p + area_t - inter)
    return -torch.log(iou).sum() / max(n_pos, 1)


def centerness_loss(ctr_logits: torch.Tensor, ctr_targets: torch.Tensor, n_pos: int) -> torch.Tensor:
    """BCE with sigmoid against the center-ness targets at positive locations."""
    if ctr_logits.numel() == 0:
        return ctr_logits.sum()
    return F.binary_cross_entropy_with_logits(
        ctr_logits, ctr_targets, reduction="sum"
    ) / max(n_pos, 1)


def keypoint_loss(kpt_heatmaps: list[torch.Tensor], target: torch.Tensor,
                  mask: torch.Tensor) -> torch.Tensor:
    """Sum over stages of the per-sample-mean squared heatmap error.

    mask is a (B,) bool tensor; masked-out samples contribute zero. The
    per-stage term averages over pixels (resolution independent) and over
    the batch.
    """
    if not kpt_heatmaps:
        return target.sum() * 0.0 if isinstance(target, torch.Tensor) else torch.tensor(0.0)
    total = None
    batch = kpt_heatmaps[0].shape[0]
    for stage in kpt_heatmaps:
        if stage.shape != target.shape:
            raise ShapeMismatch(
                f"heatmap stage shape {tuple(stage.shape)} != target {tuple(target.shape)}"
            )
        per_sample = ((stage - target) ** 2).mean(dim=(1, 2, 3))
        term = (per_sample * mask.to(per_sample.dtype)).sum() / batch
        total = term if total is None else total + term
    return total


def batch_targets(target_list, device=None, dtype=torch.float32):
    """Stack per-sample TargetMaps into per-level batch tensors."""
    levels = target_list[0].levels
    class_maps, reg_maps, ctr_maps = [], [], []
    for i in range(len(levels)):
        class_maps.append(torch.stack(
            [torch.from_numpy(t.class_maps[i]) for t in target_list]).to(device=device))
        reg_maps.append(torch.stack(
            [torch.from_numpy(t.reg_maps[i]) for t in target_list]).to(device=device, dtype=dtype))
        ctr_maps.append(torch.stack(
            [torch.from_numpy(t.ctr_maps[i]) for t in target_list]).to(device=device, dtype=dtype))
    return class_maps, reg_maps, ctr_maps


def composite_loss(outputs: NetworkOutputs, class_maps, reg_maps, ctr_maps,
                   heatmap_target: torch.Tensor | None, kpt_mask: torch.Tensor | None,
                   lam: float = 1.0):
    """Full training objective; returns (total tensor, LossBreakdown)."""
    pos_masks = [m >= 0 for m in class_maps]
    n_pos = int(sum(int(m.sum()) for m in pos_masks))

    l_cls = focal_loss(outputs.cls_logits, class_maps, n_pos)

    pred_chunks, target_chunks, ctr_logit_chunks, ctr_target_chunks = [], [], [], []
    for reg_dist, ctr_logits, reg_t, ctr_t, pos in zip(
            outputs.reg_dist, outputs.ctr_logits, reg_maps, ctr_maps, pos_masks):
        if not bool(pos.any()):
            continue
        pred_chunks.append(reg_dist.permute(0, 2, 3, 1)[pos])
        target_chunks.append(reg_t[pos].to(reg_dist.dtype))
        ctr_logit_chunks.append(ctr_logits[:, 0][pos])
        ctr_target_chunks.append(ctr_t[pos].to(ctr_logits.dtype))

    if pred_chunks:
        l_reg = iou_loss(torch.cat(pred_chunks), torch.cat(target_chunks), n_pos)
        l_cen = centerness_loss(torch.cat(ctr_logit_chunks), torch.cat(ctr_target_chunks), n_pos)
    else:
        zero = outputs.cls_logits[0].sum() * 0.0
        l_reg, l_cen = zero, zero.clone()

    if outputs.kpt_heatmaps and heatmap_target is not None:
        l_kpt = keypoint_loss(outputs.kpt_heatmaps, heatmap_target.to(outputs.kpt_heatmaps[0].dtype),
                              kpt_mask)
    else:
        l_kpt = outputs.cls_logits[0].sum() * 0.0

    total = l_cls + lam * l_reg + l_cen + l_kpt
    breakdown = LossBreakdown(
        l_cls=float(l_cls), l_reg=float(l_reg), l_cen=float(l_cen),
        l_kpt=float(l_kpt), total=float(total), n_pos=n_pos,
    )
    return total, breakdown

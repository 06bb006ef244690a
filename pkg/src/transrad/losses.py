"""Detection loss terms and their weighted combination.

Plane boxes are (..., 4) tensors in corner form (p1, q1, p2, q2); cube
boxes are (..., 6) corner tensors (r1, a1, d1, r2, a2, d2).  A box-side
distance distribution is a (..., reg_max) tensor of logits over integer
distance bins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F
from torch import Tensor

from .detmodel import RawPredictions, anchor_centers, flatten_predictions

if TYPE_CHECKING:  # pragma: no cover
    from .assignment import AssignmentResult


# ---------------------------------------------------------------------------
# box overlap
# ---------------------------------------------------------------------------

def iou_2d(a: Tensor, b: Tensor) -> Tensor:
    """Intersection over union of corner boxes; zero-area union gives 0."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return torch.where(union > 0, inter / union.clamp(min=torch.finfo(a.dtype).tiny),
                       torch.zeros_like(inter))


def iou_3d(a: Tensor, b: Tensor) -> Tensor:
    lt = torch.maximum(a[..., :3], b[..., :3])
    rb = torch.minimum(a[..., 3:], b[..., 3:])
    whd = (rb - lt).clamp(min=0)
    inter = whd[..., 0] * whd[..., 1] * whd[..., 2]
    vol_a = (a[..., 3:] - a[..., :3]).clamp(min=0).prod(dim=-1)
    vol_b = (b[..., 3:] - b[..., :3]).clamp(min=0).prod(dim=-1)
    union = vol_a + vol_b - inter
    return torch.where(union > 0, inter / union.clamp(min=torch.finfo(a.dtype).tiny),
                       torch.zeros_like(inter))


def box_center(box: Tensor) -> Tensor:
    return (box[..., :2] + box[..., 2:]) / 2


def center_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Squared center distance, un-normalized (plane units squared)."""
    return (box_center(pred) - box_center(gt)).pow(2).sum(dim=-1)


def ciou_loss(pred: Tensor, gt: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    """Complete-IoU loss: overlap, normalized center distance, and an
    aspect term gated off while IoU < 0.5.

    Returns the loss and its parts {l_iou, l_ncent, l_aspect, alpha_gate}.
    """
    iou = iou_2d(pred, gt)
    l_iou = 1.0 - iou

    cent = center_loss(pred, gt)
    enclose = torch.maximum(pred[..., 2:], gt[..., 2:]) - torch.minimum(pred[..., :2], gt[..., :2])
    diag_sq = enclose.pow(2).sum(dim=-1)
    l_ncent = torch.where(diag_sq > 0, cent / diag_sq.clamp(min=torch.finfo(pred.dtype).tiny),
                          torch.zeros_like(cent))

    w, h = pred[..., 2] - pred[..., 0], pred[..., 3] - pred[..., 1]
    w_gt, h_gt = gt[..., 2] - gt[..., 0], gt[..., 3] - gt[..., 1]
    l_aspect = (4.0 / math.pi ** 2) * (torch.atan2(w_gt, h_gt) - torch.atan2(w, h)).pow(2)

    denom = l_iou + l_aspect
    alpha = torch.where(
        (iou >= 0.5) & (denom > 0),
        l_aspect / denom.clamp(min=torch.finfo(pred.dtype).tiny),
        torch.zeros_like(denom),
    )
    loss = l_iou + l_ncent + alpha * l_aspect
    return loss, {"l_iou": l_iou, "l_ncent": l_ncent, "l_aspect": l_aspect,
                  "alpha_gate": alpha}


# ---------------------------------------------------------------------------
# distribution focal loss
# ---------------------------------------------------------------------------

class ClampCounter:
    """Counts regression targets that fell outside the bin range."""

    def __init__(self):
        self.count = 0

    def add(self, n: int):
        self.count += int(n)

    def reset(self):
        self.count = 0


dfl_clamp_counter = ClampCounter()


def dfl_decode(probs: Tensor) -> Tensor:
    """Expected bin index of a (..., reg_max) probability vector."""
    bins = torch.arange(probs.shape[-1], dtype=probs.dtype, device=probs.device)
    return (probs * bins).sum(dim=-1)


def dfl_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Cross entropy against the two bins bracketing a real-valued target.

    logits: (..., reg_max); target: (...) in [0, reg_max - 1] (values
    outside are clamped and counted on ``dfl_clamp_counter``).  An integer
    target puts weight 1 on its own bin.
    """
    reg_max = logits.shape[-1]
    clamped = target.clamp(0, reg_max - 1)
    dfl_clamp_counter.add((clamped != target).sum().item())
    low = clamped.floor().clamp(max=reg_max - 2).long()
    high = low + 1
    w_low = high.to(logits.dtype) - clamped
    w_high = clamped - low.to(logits.dtype)
    logp = F.log_softmax(logits, dim=-1)
    return -(w_low * logp.gather(-1, low.unsqueeze(-1)).squeeze(-1)
             + w_high * logp.gather(-1, high.unsqueeze(-1)).squeeze(-1))


def decode_ra_boxes(box_logits: Tensor, centers: Tensor, strides: Tensor) -> Tensor:
    """DFL logits (..., N, 4*reg_max) -> corner boxes (..., N, 4).

    Distances are expected bin values in stride units, ordered
    (to-low-r, to-low-a, to-high-r, to-high-a) from the cell center.
    """
    *lead, n, four_k = box_logits.shape
    dists = dfl_decode(box_logits.view(*lead, n, 4, four_k // 4).softmax(dim=-1))
    dists = dists * strides[..., None]
    lo = centers - dists[..., :2]
    hi = centers + dists[..., 2:]
    return torch.cat([lo, hi], dim=-1)


# ---------------------------------------------------------------------------
# focal and smooth-L1
# ---------------------------------------------------------------------------

@dataclass
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    weight: object = 1.0  # scalar or per-class tensor inside the BCE

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"focal alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")


def focal_loss(logits: Tensor, targets: Tensor, cfg: FocalConfig | None = None) -> Tensor:
    """Per-element focal term alpha_t * (1 - p_t)**gamma * BCE.

    Computed from logits for stability; ``cfg.weight`` multiplies the BCE
    (per-class weights broadcast over the last axis).
    """
    cfg = cfg or FocalConfig()
    weight = cfg.weight
    if not torch.is_tensor(weight):
        weight = torch.as_tensor(weight, dtype=logits.dtype, device=logits.device)
    bce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none") * weight
    p = torch.sigmoid(logits)
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = cfg.alpha * targets + (1 - cfg.alpha) * (1 - targets)
    return alpha_t * (1 - p_t).pow(cfg.gamma) * bce


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    diff = (pred - target).abs()
    return torch.where(diff < 1, 0.5 * diff.pow(2), diff - 0.5)


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------

COMPONENT_NAMES = ("fl_obj", "fl_cls", "ciou_ra", "cent_ra", "dfl_ra",
                   "ciou_rd", "cent_rd", "sl1_dopl", "iou_rad")


@dataclass
class LossWeights:
    """The nine combination weights, in COMPONENT_NAMES order."""

    alpha: tuple[float, ...] = (30.0, 7.5, 7.5, 0.5, 1.5, 5.0, 5.0, 80.0, 40.0)
    phase2: bool = False

    def __post_init__(self):
        if len(self.alpha) != 9:
            raise ValueError(f"expected 9 loss weights, got {len(self.alpha)}")
        if any(a < 0 for a in self.alpha):
            raise ValueError("loss weights must be non-negative")
        if self.phase2:
            self.alpha = (40.0, 15.0) + tuple(self.alpha[2:])


@dataclass
class LossBreakdown:
    fl_obj: float
    fl_cls: float
    ciou_ra: float
    cent_ra: float
    dfl_ra: float
    ciou_rd: float
    cent_rd: float
    sl1_dopl: float
    iou_rad: float
    total: float
    num_positive: int = 0

    def components(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in COMPONENT_NAMES}


def total_loss(preds: RawPredictions, assignments: list["AssignmentResult"],
               weights: LossWeights | None = None, class_weights=None,
               focal_cfg: FocalConfig | None = None,
               normalized_center: bool = False) -> tuple[Tensor, LossBreakdown]:
    """Assemble the weighted sum over a batch of per-frame assignments.

    Objectness and classification run over every anchor; the RA box terms
    are re-weighted per anchor by the raw alignment metric t; RD and
    Doppler terms are plain means over positives.  The center terms use
    raw squared distances unless ``normalized_center`` divides them by
    the enclosing-box diagonal as in the CIoU's distance term.  Returns
    the scalar total (differentiable) and a float breakdown.
    """
    weights = weights or LossWeights()
    base = focal_cfg or FocalConfig()
    flat = flatten_predictions(preds)
    batch, num_anchors = flat["obj"].shape
    if len(assignments) != batch:
        raise ValueError(f"{len(assignments)} assignments for batch of {batch}")
    device, dtype = flat["obj"].device, flat["obj"].dtype
    num_classes = preds.num_classes
    reg_max = preds.reg_max
    centers, strides = anchor_centers(preds.grid_shapes, preds.strides,
                                      device=device, dtype=dtype)

    pos_mask = torch.stack([a.positive for a in assignments]).to(device)
    obj_targets = pos_mask.to(dtype)
    fl_obj = focal_loss(flat["obj"], obj_targets,
                        FocalConfig(base.alpha, base.gamma, 1.0)).mean()

    cls_targets = torch.zeros(batch, num_anchors, num_classes, device=device, dtype=dtype)
    for b, a in enumerate(assignments):
        if a.positive.any():
            idx = a.positive.nonzero(as_tuple=True)[0]
            cls_targets[b, idx, a.cls_target[idx]] = 1.0
    if class_weights is None:
        class_weights = 1.0
    elif not torch.is_tensor(class_weights):
        class_weights = torch.as_tensor(class_weights, dtype=dtype, device=device)
    fl_cls = focal_loss(flat["cls"], cls_targets,
                        FocalConfig(base.alpha, base.gamma, class_weights)).sum(-1).mean()

    zero = torch.zeros((), device=device, dtype=dtype)
    comps = {"fl_obj": fl_obj, "fl_cls": fl_cls}
    num_pos = int(pos_mask.sum().item())
    if num_pos == 0:
        for name in COMPONENT_NAMES[2:]:
            comps[name] = zero
    else:
        b_idx, a_idx = pos_mask.nonzero(as_tuple=True)
        t = torch.stack([a.t for a in assignments]).to(device=device, dtype=dtype)[b_idx, a_idx]
        gt_ra = torch.stack([a.ra_box for a in assignments]).to(device, dtype)[b_idx, a_idx]
        gt_rd = torch.stack([a.rd_box for a in assignments]).to(device, dtype)[b_idx, a_idx]
        gt_dopl = torch.stack([a.doppler for a in assignments]).to(device, dtype)[b_idx, a_idx]
        doppler_bins = float(assignments[0].cube_shape[2])

        pred_ra = decode_ra_boxes(flat["box"], centers, strides)[b_idx, a_idx]
        ciou_vals, ciou_parts = ciou_loss(pred_ra, gt_ra)
        cent_vals = (ciou_parts["l_ncent"] if normalized_center
                     else center_loss(pred_ra, gt_ra))

        pos_centers, pos_strides = centers[a_idx], strides[a_idx]
        dist_targets = torch.cat([
            (pos_centers - gt_ra[:, :2]) / pos_strides[:, None],
            (gt_ra[:, 2:] - pos_centers) / pos_strides[:, None],
        ], dim=-1)
        box_logits = flat["box"][b_idx, a_idx].view(-1, 4, reg_max)
        dfl_vals = dfl_loss(box_logits, dist_targets).mean(dim=-1)

        comps["ciou_ra"] = (t * ciou_vals).mean()
        comps["cent_ra"] = (t * cent_vals).mean()
        comps["dfl_ra"] = (t * dfl_vals).mean()

        dopl_sig = torch.sigmoid(flat["dopl"][b_idx, a_idx])
        z = dopl_sig * doppler_bins
        z_lo, z_hi = torch.minimum(z[:, 0], z[:, 1]), torch.maximum(z[:, 0], z[:, 1])
        pred_rd = torch.stack([pred_ra[:, 0], z_lo, pred_ra[:, 2], z_hi], dim=-1)
        ciou_rd_vals, ciou_rd_parts = ciou_loss(pred_rd, gt_rd)
        comps["ciou_rd"] = ciou_rd_vals.mean()
        comps["cent_rd"] = (ciou_rd_parts["l_ncent"] if normalized_center
                            else center_loss(pred_rd, gt_rd)).mean()

        comps["sl1_dopl"] = smooth_l1(dopl_sig, gt_dopl).mean()

        pred_3d = torch.stack([pred_ra[:, 0], pred_ra[:, 1], z_lo,
                               pred_ra[:, 2], pred_ra[:, 3], z_hi], dim=-1)
        gt_3d = torch.stack([gt_ra[:, 0], gt_ra[:, 1], gt_rd[:, 1],
                             gt_ra[:, 2], gt_ra[:, 3], gt_rd[:, 3]], dim=-1)
        comps["iou_rad"] = (1.0 - iou_3d(pred_3d, gt_3d)).mean()

    total = sum(w * comps[name] for w, name in zip(weights.alpha, COMPONENT_NAMES))
    breakdown = LossBreakdown(
        **{name: float(comps[name].detach()) for name in COMPONENT_NAMES},
        total=float(total.detach()),
        num_positive=num_pos,
    )
    return total, breakdown

"""Task-aligned label assignment on the range-azimuth plane.

Each ground-truth box gathers the anchors whose cell center falls inside
its RA box, ranks them by the alignment metric t = c**alpha * l**beta
(classification probability of the GT class, RA IoU of the decoded box),
and keeps the top K.  An anchor claimed by several ground truths goes to
the one it overlaps most.  The metric handed downstream is the raw t; the
normalized variant can be switched on for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .losses import iou_2d
from .raddata import Annotation3D


@dataclass
class AssignConfig:
    alpha: float = 1.0
    beta: float = 6.0
    top_k: int = 10
    normalize_t: bool = False
    eps: float = 1e-9

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")


@dataclass
class AssignmentResult:
    """Per-anchor assignment over all levels flattened (level-major)."""

    positive: Tensor      # (N,) bool
    gt_index: Tensor      # (N,) long, -1 for negatives
    t: Tensor             # (N,) float, 0 for negatives
    cls_target: Tensor    # (N,) long, -1 for negatives
    ra_box: Tensor        # (N, 4) corner targets, valid at positives
    rd_box: Tensor        # (N, 4)
    doppler: Tensor       # (N, 2) extents normalized by the Doppler size
    center: Tensor        # (N, 2) GT box centers on the RA plane
    cube_shape: tuple[int, int, int]
    num_gt: int

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum().item())


def alignment_metric(c, l, cfg: AssignConfig | None = None):
    """t = c**alpha * l**beta for scores in [0, 1]."""
    cfg = cfg or AssignConfig()
    c_t, l_t = torch.as_tensor(c), torch.as_tensor(l)
    if ((c_t < 0) | (c_t > 1)).any() or ((l_t < 0) | (l_t > 1)).any():
        raise ValueError("classification and localization scores must lie in [0, 1]")
    return c_t ** cfg.alpha * l_t ** cfg.beta


def _empty_result(num_anchors: int, cube_shape, device, dtype) -> AssignmentResult:
    return AssignmentResult(
        positive=torch.zeros(num_anchors, dtype=torch.bool, device=device),
        gt_index=torch.full((num_anchors,), -1, dtype=torch.long, device=device),
        t=torch.zeros(num_anchors, dtype=dtype, device=device),
        cls_target=torch.full((num_anchors,), -1, dtype=torch.long, device=device),
        ra_box=torch.zeros(num_anchors, 4, dtype=dtype, device=device),
        rd_box=torch.zeros(num_anchors, 4, dtype=dtype, device=device),
        doppler=torch.zeros(num_anchors, 2, dtype=dtype, device=device),
        center=torch.zeros(num_anchors, 2, dtype=dtype, device=device),
        cube_shape=tuple(cube_shape),
        num_gt=0,
    )


def annotation_targets(annotations: list[Annotation3D], cube_shape,
                       dtype=torch.float32, device=None):
    """Stack per-GT target arrays: RA boxes, RD boxes, normalized Doppler
    extents, RA centers, class ids."""
    corners = torch.stack([
        torch.as_tensor(ann.corners(), dtype=dtype, device=device)
        for ann in annotations
    ])  # (G, 6) = (r1, a1, d1, r2, a2, d2)
    ra = corners[:, [0, 1, 3, 4]]
    rd = corners[:, [0, 2, 3, 5]]
    dopl = corners[:, [2, 5]] / float(cube_shape[2])
    center = (ra[:, :2] + ra[:, 2:]) / 2
    cls = torch.as_tensor([ann.class_id for ann in annotations],
                          dtype=torch.long, device=device)
    return ra, rd, dopl, center, cls


def tal_assign(pred_boxes: Tensor, cls_probs: Tensor, centers: Tensor,
               annotations: list[Annotation3D], cube_shape,
               cfg: AssignConfig | None = None) -> AssignmentResult:
    """Assign one frame's anchors to its ground truths.

    pred_boxes: (N, 4) decoded RA corner boxes; cls_probs: (N, C) class
    probabilities in [0, 1]; centers: (N, 2) anchor cell centers in
    cube-cell units.
    """
    cfg = cfg or AssignConfig()
    n = pred_boxes.shape[0]
    device, dtype = pred_boxes.device, pred_boxes.dtype
    if not annotations:
        return _empty_result(n, cube_shape, device, dtype)

    gt_ra, gt_rd, gt_dopl, gt_center, gt_cls = annotation_targets(
        annotations, cube_shape, dtype=dtype, device=device)
    g = gt_ra.shape[0]

    in_box = ((centers[None, :, 0] >= gt_ra[:, None, 0])
              & (centers[None, :, 0] <= gt_ra[:, None, 2])
              & (centers[None, :, 1] >= gt_ra[:, None, 1])
              & (centers[None, :, 1] <= gt_ra[:, None, 3]))  # (G, N)
    overlaps = iou_2d(gt_ra[:, None, :], pred_boxes[None, :, :])  # (G, N)
    scores = cls_probs[:, gt_cls].transpose(0, 1).clamp(0.0, 1.0)  # (G, N)
    metric = alignment_metric(scores, overlaps.clamp(0.0, 1.0), cfg)

    claimed = torch.zeros(g, n, dtype=torch.bool, device=device)
    for gi in range(g):
        cand = in_box[gi].nonzero(as_tuple=True)[0]
        if cand.numel() == 0:
            continue
        order = torch.argsort(-metric[gi, cand], stable=True)
        keep = cand[order[: cfg.top_k]]
        claimed[gi, keep] = True

    # an anchor claimed by several GTs keeps the one with the highest RA IoU
    masked_iou = torch.where(claimed, overlaps,
                             torch.full_like(overlaps, -1.0))
    best_gt = masked_iou.argmax(dim=0)  # (N,) ties -> lower GT index
    positive = claimed.any(dim=0)
    gt_index = torch.where(positive, best_gt, torch.full_like(best_gt, -1))

    t = torch.zeros(n, dtype=dtype, device=device)
    pos_idx = positive.nonzero(as_tuple=True)[0]
    t[pos_idx] = metric[gt_index[pos_idx], pos_idx]

    if cfg.normalize_t and pos_idx.numel() > 0:
        # scale each GT's metrics so their max equals its best positive IoU
        for gi in range(g):
            mine = pos_idx[gt_index[pos_idx] == gi]
            if mine.numel() == 0:
                continue
            max_t = t[mine].max()
            max_iou = overlaps[gi, mine].max()
            t[mine] = t[mine] * max_iou / (max_t + cfg.eps)

    result = _empty_result(n, cube_shape, device, dtype)
    result.positive = positive
    result.gt_index = gt_index
    result.t = t
    result.num_gt = g
    result.cls_target[pos_idx] = gt_cls[gt_index[pos_idx]]
    result.ra_box[pos_idx] = gt_ra[gt_index[pos_idx]]
    result.rd_box[pos_idx] = gt_rd[gt_index[pos_idx]]
    result.doppler[pos_idx] = gt_dopl[gt_index[pos_idx]]
    result.center[pos_idx] = gt_center[gt_index[pos_idx]]
    return result

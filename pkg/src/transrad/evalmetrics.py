"""Average-precision evaluation over 3D (RAD) and 2D (RA, RD) boxes.

Detections are ranked globally by fused score (objectness times class
probability); each one greedily matches the highest-IoU unmatched ground
truth of its class in its frame.  AP integrates the right-monotone
precision envelope over recall.  The class mean covers classes present
in the ground truth or predicted; classes in neither are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import iou_2d, iou_3d
from .postprocess import Detection
from .raddata import Annotation3D

MODES = ("3d", "ra", "rd")


@dataclass
class EvalConfig:
    iou_thresholds_3d: tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7)
    iou_thresholds_2d: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9)
    class_names: list[str] = field(default_factory=lambda: ["target"])

    def __post_init__(self):
        for thrs in (self.iou_thresholds_3d, self.iou_thresholds_2d):
            if any(not (0 < t < 1) for t in thrs):
                raise ValueError(f"thresholds must lie in (0, 1), got {thrs}")
            if any(b <= a for a, b in zip(thrs, thrs[1:])):
                raise ValueError(f"thresholds must be strictly increasing, got {thrs}")

    def thresholds(self, mode: str) -> tuple[float, ...]:
        return self.iou_thresholds_3d if mode == "3d" else self.iou_thresholds_2d


def _det_box(det: Detection, mode: str) -> np.ndarray:
    if mode == "3d":
        return det.box3d
    return det.ra_box() if mode == "ra" else det.rd_box()


def _gt_box(ann: Annotation3D, mode: str) -> np.ndarray:
    corners = ann.corners()
    if mode == "3d":
        return corners
    return corners[[0, 1, 3, 4]] if mode == "ra" else corners[[0, 2, 3, 5]]


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    fn = iou_3d if a.shape[-1] == 6 else iou_2d
    return float(fn(torch.as_tensor(a), torch.as_tensor(b)))


def match_detections(dets_by_frame: dict[str, list[Detection]],
                     gts_by_frame: dict[str, list[Annotation3D]],
                     iou_thr: float, class_id: int,
                     mode: str = "3d") -> tuple[np.ndarray, int]:
    """TP/FP flags in global score order for one class, plus its GT count."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    entries = []
    for frame_id, dets in dets_by_frame.items():
        for det in dets:
            if det.class_id == class_id:
                entries.append((det.score, frame_id, det))
    entries.sort(key=lambda e: (-e[0], e[1], tuple(e[2].box3d)))

    gt_boxes = {
        frame_id: [_gt_box(a, mode) for a in anns if a.class_id == class_id]
        for frame_id, anns in gts_by_frame.items()
    }
    num_gt = sum(len(v) for v in gt_boxes.values())
    matched = {frame_id: [False] * len(v) for frame_id, v in gt_boxes.items()}

    flags = np.zeros(len(entries), dtype=bool)
    for i, (_, frame_id, det) in enumerate(entries):
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gt_boxes.get(frame_id, [])):
            if matched[frame_id][j]:
                continue
            iou = _iou(_det_box(det, mode), gt)
            if iou >= iou_thr and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            matched[frame_id][best_j] = True
            flags[i] = True
    return flags, num_gt


def average_precision(flags: np.ndarray, num_gt: int) -> float:
    """All-point AP: integrate the right-max precision envelope over recall."""
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if num_gt == 0 or len(flags) == 0:
        return 0.0
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def mean_ap(ap_by_class: dict[int, dict[float, float]],
            eligible: set[int]) -> tuple[float, dict[float, float]]:
    """Headline mAP and the per-threshold means over eligible classes."""
    if not eligible:
        return 0.0, {}
    thresholds = sorted(next(iter(ap_by_class.values())).keys()) if ap_by_class else []
    per_thr = {
        thr: float(np.mean([ap_by_class[c][thr] for c in sorted(eligible)]))
        for thr in thresholds
    }
    headline = float(np.mean(list(per_thr.values()))) if per_thr else 0.0
    return headline, per_thr


@dataclass
class EvalResult:
    mode: str
    map_value: float
    per_threshold: dict[float, float]
    ap_by_class: dict[int, dict[float, float]]

    def ap_at(self, threshold: float) -> float:
        return self.per_threshold[threshold]


def evaluate_detections(dets_by_frame: dict[str, list[Detection]],
                        gts_by_frame: dict[str, list[Annotation3D]],
                        cfg: EvalConfig, mode: str = "3d") -> EvalResult:
    """Full AP evaluation of one projection mode."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    gt_classes = {a.class_id for anns in gts_by_frame.values() for a in anns}
    pred_classes = {d.class_id for dets in dets_by_frame.values() for d in dets}
    eligible = gt_classes | pred_classes

    ap_by_class: dict[int, dict[float, float]] = {}
    for class_id in sorted(eligible):
        ap_by_class[class_id] = {}
        for thr in cfg.thresholds(mode):
            flags, num_gt = match_detections(dets_by_frame, gts_by_frame,
                                             thr, class_id, mode)
            ap_by_class[class_id][thr] = average_precision(flags, num_gt)
    headline, per_thr = mean_ap(ap_by_class, eligible)
    return EvalResult(mode, headline, per_thr, ap_by_class)


def count_params(model) -> int:
    """Total learnable scalar parameters of a torch module."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# results tables
# ---------------------------------------------------------------------------

def format_results(results: list[EvalResult], class_names: list[str]) -> str:
    lines = []
    for res in results:
        thrs = sorted(res.per_threshold)
        header = " ".join(f"AP@{t:g}" for t in thrs)
        lines.append(f"[{res.mode.upper()}] mAP = {res.map_value:.4f}")
        lines.append(f"  {'class':<14s} {header}")
        for class_id, aps in sorted(res.ap_by_class.items()):
            name = class_names[class_id] if class_id < len(class_names) else str(class_id)
            row = " ".join(f"{aps[t]:6.4f}" for t in thrs)
            lines.append(f"  {name:<14s} {row}")
        mean_row = " ".join(f"{res.per_threshold[t]:6.4f}" for t in thrs)
        lines.append(f"  {'mean':<14s} {mean_row}")
    return "\n".join(lines) + "\n"


def write_results(path: Path | str, results: list[EvalResult], class_names: list[str]):
    """Plain-text table plus a flat key-value file next to it."""
    path = Path(path)
    path.write_text(format_results(results, class_names), encoding="utf-8")
    kv_lines = []
    for res in results:
        kv_lines.append(f"map_{res.mode}={res.map_value!r}")
        for thr, ap in sorted(res.per_threshold.items()):
            kv_lines.append(f"ap_{res.mode}_{thr:g}={ap!r}")
    path.with_suffix(path.suffix + ".kv").write_text(
        "".join(ln + "\n" for ln in kv_lines), encoding="utf-8")

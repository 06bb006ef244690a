"""Decode head outputs into scored 3D detections and filter them.

The pipeline is decode -> class-wise NMS -> location-aware NMS.  Both
NMS stages rank by classification score and measure 3D overlap (a
2D range-azimuth mode exists for ablation).  Location-aware NMS removes
a lower-ranked box only when it overlaps the kept box above the
threshold *and* carries a different class: cross-class duplicates of one
physical target collapse onto the strongest hypothesis, while same-class
duplicates are the classic NMS stage's job.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .detmodel import RawPredictions, anchor_centers, flatten_predictions
from .errors import DataError
from .losses import decode_ra_boxes, iou_2d, iou_3d


@dataclass
class Detection:
    """One scored box: corners (r1, a1, d1, r2, a2, d2) in cube cells."""

    box3d: np.ndarray
    class_id: int
    class_score: float
    objectness: float
    level: int = -1

    def __post_init__(self):
        self.box3d = np.asarray(self.box3d, dtype=np.float64)

    @property
    def score(self) -> float:
        """Fused confidence: objectness times class probability."""
        return self.class_score * self.objectness

    def ra_box(self) -> np.ndarray:
        return self.box3d[[0, 1, 3, 4]]

    def rd_box(self) -> np.ndarray:
        return self.box3d[[0, 2, 3, 5]]


@dataclass
class PostprocessConfig:
    score_thr: float = 0.3
    class_nms_thr: float = 0.3
    la_thr: float = 0.1
    ra_only_iou: bool = False  # ablation: 2D RA overlap inside both NMS stages


def _pairwise_iou(kept: Detection, rest: list[Detection], ra_only: bool) -> np.ndarray:
    if not rest:
        return np.zeros(0)
    if ra_only:
        a = torch.as_tensor(kept.ra_box())
        b = torch.as_tensor(np.stack([d.ra_box() for d in rest]))
        return iou_2d(a, b).numpy()
    a = torch.as_tensor(kept.box3d)
    b = torch.as_tensor(np.stack([d.box3d for d in rest]))
    return iou_3d(a, b).numpy()


def _sort_key(det: Detection):
    # descending class score; ties broken on class id then box coordinates
    return (-det.class_score, det.class_id, tuple(det.box3d))


def decode_batch(preds: RawPredictions, cube_shape, score_thr: float) -> list[list[Detection]]:
    """Turn raw head outputs into per-frame detection lists."""
    with torch.no_grad():
        flat = flatten_predictions(preds)
        device, dtype = flat["obj"].device, flat["obj"].dtype
        centers, strides = anchor_centers(preds.grid_shapes, preds.strides,
                                          device=device, dtype=dtype)
        boxes = decode_ra_boxes(flat["box"], centers, strides)       # (B, N, 4)
        obj = torch.sigmoid(flat["obj"])                             # (B, N)
        cls = torch.sigmoid(flat["cls"])                             # (B, N, C)
        z = torch.sigmoid(flat["dopl"]) * float(cube_shape[2])       # (B, N, 2)
        z = torch.stack([z.min(dim=-1).values, z.max(dim=-1).values], dim=-1)
        cls_score, cls_id = cls.max(dim=-1)
        score = obj * cls_score

    level_ids = np.concatenate([
        np.full(h * w, li) for li, (h, w) in enumerate(preds.grid_shapes)
    ])
    r_max, a_max, d_max = (float(s) for s in cube_shape)
    results = []
    for b in range(score.shape[0]):
        keep = (score[b] >= score_thr).nonzero(as_tuple=True)[0]
        dets = []
        for n in keep.tolist():
            r1, a1, r2, a2 = boxes[b, n].tolist()
            d1, d2 = z[b, n].tolist()
            box = np.array([
                min(max(r1, 0.0), r_max), min(max(a1, 0.0), a_max),
                min(max(d1, 0.0), d_max), min(max(r2, 0.0), r_max),
                min(max(a2, 0.0), a_max), min(max(d2, 0.0), d_max),
            ])
            dets.append(Detection(box, int(cls_id[b, n]), float(cls_score[b, n]),
                                  float(obj[b, n]), int(level_ids[n])))
        results.append(dets)
    return results


def decode(preds: RawPredictions, cube_shape, score_thr: float) -> list[Detection]:
    """Single-frame decode; predictions must carry batch size 1."""
    batches = decode_batch(preds, cube_shape, score_thr)
    if len(batches) != 1:
        raise ValueError(f"decode expects batch size 1, got {len(batches)}")
    return batches[0]


def class_nms(dets: list[Detection], iou_thr: float,
              ra_only: bool = False) -> list[Detection]:
    """Greedy per-class suppression of overlapping duplicates."""
    survivors = []
    for cls in sorted({d.class_id for d in dets}):
        pool = sorted((d for d in dets if d.class_id == cls), key=_sort_key)
        while pool:
            best = pool.pop(0)
            survivors.append(best)
            ious = _pairwise_iou(best, pool, ra_only)
            pool = [d for d, iou in zip(pool, ious) if iou <= iou_thr]
    return sorted(survivors, key=_sort_key)


def la_nms(dets: list[Detection], thr: float = 0.1,
           ra_only: bool = False) -> list[Detection]:
    """Cross-class suppression: a box survives a kept higher-scored box if
    it overlaps no more than ``thr`` or shares its class."""
    pool = sorted(dets, key=_sort_key)
    selected = []
    while pool:
        current = pool.pop(0)
        selected.append(current)
        ious = _pairwise_iou(current, pool, ra_only)
        pool = [d for d, iou in zip(pool, ious)
                if iou <= thr or d.class_id == current.class_id]
    return selected


def postprocess_pipeline(preds: RawPredictions, cube_shape,
                         cfg: PostprocessConfig | None = None) -> list[Detection]:
    cfg = cfg or PostprocessConfig()
    dets = decode(preds, cube_shape, cfg.score_thr)
    dets = class_nms(dets, cfg.class_nms_thr, cfg.ra_only_iou)
    return la_nms(dets, cfg.la_thr, cfg.ra_only_iou)


# ---------------------------------------------------------------------------
# detection dump
# ---------------------------------------------------------------------------

def write_detections(path: Path | str, dets_by_frame: dict[str, list[Detection]]):
    """One line per detection:
    ``frame_id class_id class_score objectness r1 a1 d1 r2 a2 d2``."""
    lines = []
    for frame_id in sorted(dets_by_frame):
        for det in dets_by_frame[frame_id]:
            coords = " ".join(repr(float(v)) for v in det.box3d)
            lines.append(f"{frame_id} {det.class_id} {det.class_score!r} "
                         f"{det.objectness!r} {coords}")
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def read_detections(path: Path | str) -> dict[str, list[Detection]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing detection dump {path}")
    dets_by_frame: dict[str, list[Detection]] = {}
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 10:
            raise DataError(f"{path}:{ln}: expected 10 fields, got {len(parts)}")
        frame_id = parts[0]
        det = Detection(
            np.array([float(v) for v in parts[4:10]]),
            class_id=int(parts[1]),
            class_score=float(parts[2]),
            objectness=float(parts[3]),
        )
        dets_by_frame.setdefault(frame_id, []).append(det)
    return dets_by_frame

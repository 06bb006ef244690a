"""Decoding and the two NMS stages, including a literal transcription of
the location-aware suppression loop as an oracle."""

import math

import numpy as np
import pytest
import torch

from transrad.detmodel import RawPredictions
from transrad.postprocess import (
    Detection,
    PostprocessConfig,
    class_nms,
    decode,
    la_nms,
    postprocess_pipeline,
    read_detections,
    write_detections,
)

THRESHOLDS = (0.05, 0.1, 0.3)


def det(corners, class_id, class_score, objectness=1.0):
    return Detection(np.asarray(corners, dtype=float), class_id, class_score, objectness)


def _centersize_iou(a, b):
    """IoU of two rows in [x, y, z, w, h, d, ...] center-size layout."""
    a_lo, a_hi = a[:3] - a[3:6] / 2, a[:3] + a[3:6] / 2
    b_lo, b_hi = b[:3] - b[3:6] / 2, b[:3] + b[3:6] / 2
    inter = np.prod(np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0, None))
    union = np.prod(a_hi - a_lo) + np.prod(b_hi - b_lo) - inter
    return inter / union if union > 0 else 0.0


def la_nms_oracle(bbox: np.ndarray, thr: float) -> np.ndarray:
    """Line-by-line greedy loop over [x, y, z, w, h, d, score, class] rows."""
    bbox = bbox[np.argsort(-bbox[:, 6], kind="stable")]
    selected = []
    while len(bbox) > 0:
        current = bbox[0]
        selected.append(current)
        bbox = bbox[1:]
        ious = [_centersize_iou(current, row) for row in bbox]
        keep = [i for i, row in enumerate(bbox)
                if ious[i] <= thr or row[7] == current[7]]
        bbox = bbox[keep]
    return np.array(selected).reshape(-1, 8)


def dets_to_rows(dets):
    rows = []
    for d in dets:
        lo, hi = d.box3d[:3], d.box3d[3:]
        rows.append(np.concatenate([(lo + hi) / 2, hi - lo,
                                    [d.class_score, d.class_id]]))
    return np.array(rows).reshape(-1, 8)


def random_detections(rng, max_boxes=20, extent=64.0, num_classes=4):
    n = int(rng.integers(1, max_boxes + 1))
    dets = []
    for _ in range(n):
        lo = rng.uniform(0, extent * 0.75, 3)
        hi = lo + rng.uniform(2, extent / 2, 3)
        dets.append(Detection(np.concatenate([lo, np.minimum(hi, extent)]),
                              int(rng.integers(0, num_classes)),
                              float(rng.uniform(0.01, 1.0)),
                              float(rng.uniform(0.2, 1.0))))
    return dets


def single_level_preds(grid=4, stride=8, num_classes=3, reg_max=8):
    zeros = lambda c: torch.full((1, c, grid, grid), -40.0)
    return RawPredictions(obj=[zeros(1)], cls=[zeros(num_classes)],
                          box=[zeros(4 * reg_max)], dopl=[torch.zeros(1, 2, grid, grid)],
                          strides=(stride,), reg_max=reg_max, num_classes=num_classes)


def logit(p):
    return math.log(p / (1 - p))


class TestDecode:
    def test_box_arithmetic(self):
        preds = single_level_preds()
        reg_max = preds.reg_max
        cell = (1, 2)  # center (12, 20)
        with torch.no_grad():
            preds.obj[0][0, 0, cell[0], cell[1]] = 40.0
            preds.cls[0][0, 1, cell[0], cell[1]] = 40.0
            for side in range(4):
                preds.box[0][0, side * reg_max + 2, cell[0], cell[1]] = 40.0
        dets = decode(preds, (32, 32, 64), score_thr=0.5)
        assert len(dets) == 1
        d = dets[0]
        assert d.class_id == 1
        assert d.class_score == pytest.approx(1.0, abs=1e-9)
        assert d.objectness == pytest.approx(1.0, abs=1e-9)
        # one-hot bin 2 on every side, stride 8 -> +/- 16 cells from (12, 20)
        assert d.box3d[0] == pytest.approx(0.0, abs=1e-6)   # clamped at 12-16 < 0
        assert d.box3d[1] == pytest.approx(4.0, abs=1e-6)
        assert d.box3d[3] == pytest.approx(28.0, abs=1e-6)
        assert d.box3d[4] == pytest.approx(32.0, abs=1e-6)  # clamped at 20+16 > 32

    def test_doppler_extents(self):
        preds = single_level_preds()
        cell = (2, 2)
        with torch.no_grad():
            preds.obj[0][0, 0, cell[0], cell[1]] = 40.0
            preds.cls[0][0, 0, cell[0], cell[1]] = 40.0
            preds.dopl[0][0, 0, cell[0], cell[1]] = logit(0.75)
            preds.dopl[0][0, 1, cell[0], cell[1]] = logit(0.25)
        dets = decode(preds, (32, 32, 256), score_thr=0.5)
        assert len(dets) == 1
        # squashed (0.75, 0.25) reordered: z1 = 64, z2 = 192
        assert dets[0].box3d[2] == pytest.approx(64.0, abs=1e-4)
        assert dets[0].box3d[5] == pytest.approx(192.0, abs=1e-4)

    def test_score_is_product(self):
        preds = single_level_preds()
        with torch.no_grad():
            preds.obj[0][0, 0, 0, 0] = logit(0.8)
            preds.cls[0][0, 2, 0, 0] = logit(0.9)
        dets = decode(preds, (32, 32, 64), score_thr=0.5)
        assert len(dets) == 1
        assert dets[0].score == pytest.approx(0.72, abs=1e-6)
        assert dets[0].class_id == 2

    def test_threshold_drops_everything(self):
        dets = decode(single_level_preds(), (32, 32, 64), score_thr=0.3)
        assert dets == []


class TestClassNms:
    def test_same_class_duplicates_collapse(self):
        a = det([0, 0, 0, 4, 4, 4], 0, 0.9)
        b = det([0, 0, 0, 4, 4, 4], 0, 0.8)
        out = class_nms([a, b], iou_thr=0.3)
        assert len(out) == 1 and out[0].class_score == 0.9

    def test_different_classes_both_survive(self):
        a = det([0, 0, 0, 4, 4, 4], 0, 0.9)
        b = det([0, 0, 0, 4, 4, 4], 1, 0.8)
        assert len(class_nms([a, b], iou_thr=0.3)) == 2

    def test_empty_input(self):
        assert class_nms([], 0.3) == []


class TestLaNms:
    def test_cross_class_overlap_suppressed(self):
        a = det([0, 0, 0, 4, 4, 4], 0, 0.9)
        b = det([0, 0, 0, 4, 4, 4], 1, 0.8)
        out = la_nms([a, b], thr=0.1)
        assert len(out) == 1 and out[0].class_score == 0.9

    def test_same_class_overlap_survives(self):
        a = det([0, 0, 0, 4, 4, 4], 0, 0.9)
        b = det([0, 0, 0, 4, 4, 4], 0, 0.8)
        assert len(la_nms([a, b], thr=0.1)) == 2

    def test_disjoint_all_survive(self):
        dets = [det([i * 10, 0, 0, i * 10 + 4, 4, 4], i % 2, 0.5 + 0.1 * i)
                for i in range(4)]
        assert len(la_nms(dets, thr=0.1)) == 4

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(0)
        for trial in range(1000):
            dets = random_detections(rng)
            thr = THRESHOLDS[trial % len(THRESHOLDS)]
            got = dets_to_rows(la_nms(dets, thr))
            expected = la_nms_oracle(dets_to_rows(dets), thr)
            assert got.shape == expected.shape, f"trial {trial}"
            assert np.allclose(got, expected, atol=1e-9), f"trial {trial}"

    def test_no_surviving_cross_class_overlap(self):
        rng = np.random.default_rng(1)
        for trial in range(200):
            dets = random_detections(rng)
            thr = THRESHOLDS[trial % len(THRESHOLDS)]
            out = la_nms(dets, thr)
            rows = dets_to_rows(out)
            for i in range(len(out)):
                for j in range(i + 1, len(out)):
                    if out[i].class_id != out[j].class_id:
                        assert _centersize_iou(rows[i], rows[j]) <= thr + 1e-12

    def test_survivors_are_subset_in_order(self):
        rng = np.random.default_rng(2)
        dets = random_detections(rng, max_boxes=15)
        out = la_nms(dets, 0.1)
        ids = [id(d) for d in dets]
        assert all(id(d) in ids for d in out)
        scores = [d.class_score for d in out]
        assert scores == sorted(scores, reverse=True)

    def test_input_order_independence(self):
        rng = np.random.default_rng(3)
        dets = random_detections(rng, max_boxes=12)
        base = dets_to_rows(la_nms(dets, 0.1))
        for _ in range(5):
            shuffled = list(dets)
            rng.shuffle(shuffled)
            assert np.allclose(dets_to_rows(la_nms(shuffled, 0.1)), base)


class TestPipeline:
    def test_three_stacked_boxes_trace(self):
        # same-class pair 0.9 / 0.8 plus other-class 0.7, all overlapping
        a = det([0, 0, 0, 4, 4, 4], 0, 0.9)
        b = det([0, 0, 0, 4, 4, 4], 0, 0.8)
        c = det([0.5, 0, 0, 4, 4, 4], 1, 0.7)
        stage1 = class_nms([a, b, c], iou_thr=0.3)
        assert sorted(d.class_score for d in stage1) == [0.7, 0.9]
        stage2 = la_nms(stage1, thr=0.1)
        assert [d.class_score for d in stage2] == [0.9]

    def test_empty_and_single(self):
        preds = single_level_preds()
        assert postprocess_pipeline(preds, (32, 32, 64)) == []
        with torch.no_grad():
            preds.obj[0][0, 0, 1, 1] = 40.0
            preds.cls[0][0, 0, 1, 1] = 40.0
        out = postprocess_pipeline(preds, (32, 32, 64),
                                   PostprocessConfig(score_thr=0.5))
        assert len(out) == 1

    def test_pipeline_runs_all_stages(self):
        preds = single_level_preds()
        with torch.no_grad():
            # two adjacent cells, different classes, same decoded box region
            preds.obj[0][0, 0, 1, 1] = 40.0
            preds.cls[0][0, 0, 1, 1] = logit(0.9)
            preds.obj[0][0, 0, 1, 2] = 40.0
            preds.cls[0][0, 1, 1, 2] = logit(0.8)
            reg_max = preds.reg_max
            for cell in ((1, 1), (1, 2)):
                preds.dopl[0][0, 0, cell[0], cell[1]] = logit(0.25)
                preds.dopl[0][0, 1, cell[0], cell[1]] = logit(0.75)
                for side in range(4):
                    preds.box[0][0, side * reg_max + 2, cell[0], cell[1]] = 40.0
        out = postprocess_pipeline(preds, (64, 64, 64),
                                   PostprocessConfig(score_thr=0.3, la_thr=0.1))
        assert len(out) == 1 and out[0].class_id == 0


class TestDetectionDump:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        dets = {"frame_a": random_detections(rng, max_boxes=5),
                "frame_b": random_detections(rng, max_boxes=3)}
        path = tmp_path / "dets.txt"
        write_detections(path, dets)
        loaded = read_detections(path)
        assert set(loaded) == {"frame_a", "frame_b"}
        for fid in dets:
            assert len(loaded[fid]) == len(dets[fid])
            for a, b in zip(dets[fid], loaded[fid]):
                assert a.class_id == b.class_id
                assert a.class_score == b.class_score
                assert a.objectness == b.objectness
                assert np.array_equal(a.box3d, b.box3d)

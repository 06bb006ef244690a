"""Cube resizing, class weights, synthetic frames, and dataset I/O."""

import numpy as np
import pytest

from transrad.errors import DataError, GenerationError
from transrad.raddata import (
    Annotation3D,
    ClassWeightConfig,
    FrameRecord,
    RadCube,
    SceneSpec,
    compute_class_weights,
    load_frame,
    load_frames,
    read_labels,
    rescale_annotations,
    resize_doppler,
    save_frame,
    save_frames,
    synth_frame,
    write_labels,
)


class TestRadCube:
    def test_rejects_nan(self):
        values = np.ones((2, 2, 2), dtype=np.float32)
        values[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            RadCube(values)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            RadCube(np.ones((2, 2), dtype=np.float32))


class TestResizeDoppler:
    def test_identity_when_target_equals_source(self):
        rng = np.random.default_rng(0)
        cube = RadCube(rng.uniform(size=(4, 5, 8)).astype(np.float32))
        out = resize_doppler(cube, 8)
        assert np.array_equal(out.values, cube.values)

    def test_upsample_reads_source_k_div_4(self):
        rng = np.random.default_rng(1)
        cube = RadCube(rng.uniform(size=(3, 3, 64)).astype(np.float32))
        out = resize_doppler(cube, 256)
        assert out.shape == (3, 3, 256)
        for k in (0, 1, 4, 100, 255):
            assert np.array_equal(out.values[:, :, k], cube.values[:, :, k // 4])

    def test_two_plane_expansion(self):
        values = np.zeros((2, 2, 2), dtype=np.float32)
        values[:, :, 0] = 1.0
        values[:, :, 1] = 2.0
        out = resize_doppler(RadCube(values), 4)
        planes = [out.values[0, 0, k] for k in range(4)]
        assert planes == [1.0, 1.0, 2.0, 2.0]

    def test_round_trip_on_sampled_planes(self):
        rng = np.random.default_rng(2)
        cube = RadCube(rng.uniform(size=(2, 2, 16)).astype(np.float32))
        up = resize_doppler(cube, 64)
        down = resize_doppler(up, 16)
        assert np.array_equal(down.values, cube.values)

    def test_rejects_nonpositive_target(self):
        cube = RadCube(np.ones((2, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            resize_doppler(cube, 0)


class TestRescaleAnnotations:
    def test_identity(self):
        ann = Annotation3D(0, (1, 2, 3), (1, 1, 1))
        out = rescale_annotations(ann, 64, 64)
        assert out.center == ann.center and out.size == ann.size

    def test_factor_four(self):
        ann = Annotation3D(1, (5, 6, 10), (2, 3, 4))
        out = rescale_annotations(ann, 64, 256)
        assert out.center == (5, 6, 40)
        assert out.size == (2, 3, 16)

    def test_fractional_factor(self):
        ann = Annotation3D(0, (0.5, 0.5, 10), (1, 1, 4))
        out = rescale_annotations(ann, 64, 96)
        assert out.center[2] == pytest.approx(15.0)
        assert out.size[2] == pytest.approx(6.0)


class TestClassWeights:
    def test_symmetric_counts(self):
        w = compute_class_weights(ClassWeightConfig([1, 1]))
        assert np.allclose(w, [0.5, 0.5])

    def test_inverse_frequency(self):
        w = compute_class_weights(ClassWeightConfig([9, 1]))
        assert np.allclose(w, [0.1, 0.9])

    def test_clamp_then_normalize(self):
        w = compute_class_weights(ClassWeightConfig([99, 1], w_min=0.05))
        assert w[0] == pytest.approx(0.05 / 1.04, abs=1e-12)
        assert w[1] == pytest.approx(0.99 / 1.04, abs=1e-12)

    def test_sums_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            counts = rng.integers(0, 1000, size=rng.integers(2, 8)).tolist()
            if sum(counts) == 0:
                continue
            w = compute_class_weights(ClassWeightConfig(counts))
            assert abs(w.sum() - 1.0) < 1e-12

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        counts = [3, 17, 120, 5, 98]
        w = compute_class_weights(ClassWeightConfig(counts))
        for _ in range(10):
            perm = rng.permutation(len(counts))
            w_perm = compute_class_weights(
                ClassWeightConfig([counts[i] for i in perm]))
            assert np.allclose(w_perm, w[perm], atol=1e-15)

    def test_dominant_class_gets_smallest_weight(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            counts = rng.integers(0, 500, size=5).tolist()
            if sum(counts) == 0:
                continue
            w = compute_class_weights(ClassWeightConfig(counts, w_min=0.0))
            order = np.argsort(counts)
            sorted_w = w[order]
            assert all(a >= b - 1e-12 for a, b in zip(sorted_w, sorted_w[1:]))

    def test_zero_count_class_allowed(self):
        w = compute_class_weights(ClassWeightConfig([0, 10]))
        assert w[0] > w[1]

    def test_all_zero_counts_error(self):
        with pytest.raises(ValueError):
            compute_class_weights(ClassWeightConfig([0, 0, 0]))


class TestSynthFrame:
    def test_zero_targets_pure_noise(self):
        spec = SceneSpec(shape=(16, 16, 8), num_targets=0, noise_level=0.1,
                         size_range=((2, 4), (2, 4), (2, 4)))
        record = synth_frame(0, spec)
        assert record.annotations == []
        assert record.cube.shape == (16, 16, 8)
        assert record.cube.values.max() <= 0.1

    def test_zero_noise_argmax_at_center(self):
        spec = SceneSpec(shape=(32, 32, 16), num_targets=3, noise_level=0.0,
                         size_range=((4, 8), (4, 8), (3, 6)))
        record = synth_frame(7, spec)
        assert len(record.annotations) == 3
        for ann in record.annotations:
            lo = np.floor(np.array(ann.corners()[:3])).astype(int)
            hi = np.ceil(np.array(ann.corners()[3:])).astype(int)
            region = record.cube.values[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
            peak = np.unravel_index(np.argmax(region), region.shape)
            assert tuple(np.array(peak) + lo) == tuple(int(c) for c in ann.center)

    def test_box_encloses_signal(self):
        spec = SceneSpec(shape=(32, 32, 16), num_targets=1, noise_level=0.0,
                         size_range=((6, 6), (8, 8), (4, 4)))
        record = synth_frame(3, spec)
        ann = record.annotations[0]
        box = ann.corners()
        signal = np.argwhere(record.cube.values > 0)
        assert (signal >= np.floor(box[:3])).all()
        assert (signal <= np.ceil(box[3:])).all()

    def test_determinism(self):
        spec = SceneSpec(shape=(24, 24, 12), num_targets=2, noise_level=0.05)
        a = synth_frame(42, spec)
        b = synth_frame(42, spec)
        assert np.array_equal(a.cube.values, b.cube.values)
        assert len(a.annotations) == len(b.annotations)
        for ann_a, ann_b in zip(a.annotations, b.annotations):
            assert ann_a == ann_b
        assert a.frame_id == b.frame_id

    def test_unsatisfiable_scene_errors(self):
        with pytest.raises(GenerationError):
            SceneSpec(shape=(8, 8, 4), num_targets=1,
                      size_range=((12, 16), (2, 3), (2, 3)))
        # targets fit individually but cannot all be placed disjointly
        spec = SceneSpec(shape=(10, 10, 6), num_targets=30,
                         size_range=((6, 8), (6, 8), (4, 5)))
        with pytest.raises(GenerationError):
            synth_frame(0, spec)

    def test_annotations_inside_cube(self):
        spec = SceneSpec(shape=(20, 24, 10), num_targets=2,
                         size_range=((4, 10), (4, 10), (2, 6)))
        for seed in range(10):
            record = synth_frame(seed, spec)
            record.validate(spec.num_classes)


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        spec = SceneSpec(shape=(16, 20, 8), num_targets=2,
                         size_range=((3, 6), (3, 6), (2, 4)))
        record = synth_frame(11, spec)
        save_frame(record, tmp_path)
        loaded = load_frame(tmp_path, record.frame_id)
        assert np.array_equal(loaded.cube.values, record.cube.values)
        assert loaded.annotations == record.annotations
        assert loaded.frame_id == record.frame_id

    def test_load_frames_sorted(self, tmp_path):
        spec = SceneSpec(shape=(8, 8, 4), num_targets=0,
                         size_range=((2, 3), (2, 3), (2, 3)))
        frames = [synth_frame(i, spec, f"f_{i:03d}") for i in (3, 1, 2)]
        save_frames(frames, tmp_path)
        loaded = load_frames(tmp_path)
        assert [f.frame_id for f in loaded] == ["f_001", "f_002", "f_003"]

    def test_truncated_cube_errors(self, tmp_path):
        spec = SceneSpec(shape=(8, 8, 4), num_targets=0,
                         size_range=((2, 3), (2, 3), (2, 3)))
        record = synth_frame(0, spec, "broken")
        save_frame(record, tmp_path)
        rad = tmp_path / "broken.rad"
        rad.write_bytes(rad.read_bytes()[:-8])
        with pytest.raises(DataError, match="broken"):
            load_frame(tmp_path, "broken")

    def test_bad_magic_errors(self, tmp_path):
        spec = SceneSpec(shape=(8, 8, 4), num_targets=0,
                         size_range=((2, 3), (2, 3), (2, 3)))
        record = synth_frame(0, spec, "nomagic")
        save_frame(record, tmp_path)
        rad = tmp_path / "nomagic.rad"
        raw = bytearray(rad.read_bytes())
        raw[:4] = b"XXXX"
        rad.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="magic"):
            load_frame(tmp_path, "nomagic")

    def test_negative_depth_rejected(self, tmp_path):
        spec = SceneSpec(shape=(8, 8, 4), num_targets=0,
                         size_range=((2, 3), (2, 3), (2, 3)))
        record = synth_frame(0, spec, "badann")
        save_frame(record, tmp_path)
        (tmp_path / "badann.ann").write_text("0 4.0 4.0 2.0 2.0 2.0 -1.0\n")
        with pytest.raises(DataError, match="badann"):
            load_frame(tmp_path, "badann")

    def test_out_of_bounds_annotation_rejected(self, tmp_path):
        spec = SceneSpec(shape=(8, 8, 4), num_targets=0,
                         size_range=((2, 3), (2, 3), (2, 3)))
        record = synth_frame(0, spec, "oob")
        save_frame(record, tmp_path)
        (tmp_path / "oob.ann").write_text("0 7.5 4.0 2.0 4.0 2.0 2.0\n")
        with pytest.raises(DataError, match="oob"):
            load_frame(tmp_path, "oob")

    def test_missing_frame_errors(self, tmp_path):
        with pytest.raises(DataError, match="ghost"):
            load_frame(tmp_path, "ghost")

    def test_labels_round_trip(self, tmp_path):
        names = ["person", "bicycle", "car"]
        write_labels(tmp_path, names)
        assert read_labels(tmp_path) == names

    def test_missing_labels_errors(self, tmp_path):
        with pytest.raises(DataError):
            read_labels(tmp_path)

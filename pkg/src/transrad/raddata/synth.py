"""Synthetic radar frame generation.

Targets are separable raised-cosine blobs: intensity peaks at the
annotated center cell and falls strictly to zero at the box faces, so the
annotation box encloses everything the blob adds above the noise floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import GenerationError
from .cube import Annotation3D, FrameRecord, RadCube

_PLACEMENT_TRIES = 200


@dataclass
class SceneSpec:
    """Scene description for one synthetic frame."""

    shape: tuple[int, int, int] = (64, 64, 32)
    num_targets: int = 2
    num_classes: int = 3
    class_mix: list[float] | None = None          # per-class sampling probs
    size_range: tuple[tuple[float, float], ...] = ((6.0, 14.0), (6.0, 14.0), (4.0, 10.0))
    peak_range: tuple[float, float] = (1.0, 2.0)
    noise_level: float = 0.05

    def __post_init__(self):
        if self.num_targets < 0:
            raise ValueError("num_targets must be >= 0")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.size_range) != 3:
            raise ValueError("size_range needs one (min, max) pair per axis")
        for (lo, hi), dim in zip(self.size_range, self.shape):
            if not (0 < lo <= hi):
                raise ValueError(f"bad size range ({lo}, {hi})")
            if hi > dim:
                raise GenerationError(
                    f"size range ({lo}, {hi}) exceeds cube extent {dim}"
                )
        if self.class_mix is not None and len(self.class_mix) != self.num_classes:
            raise ValueError("class_mix length must equal num_classes")


def _profile(offsets: np.ndarray, half_extent: float) -> np.ndarray:
    """Raised-cosine bump: 1 at offset 0, strictly decreasing, 0 outside."""
    u = np.abs(offsets) / half_extent
    out = np.where(u < 1.0, 0.5 * (1.0 + np.cos(np.pi * np.clip(u, 0.0, 1.0))), 0.0)
    return out


def _boxes_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    return bool((np.minimum(a[3:], b[3:]) - np.maximum(a[:3], b[:3]) > 0).all())


def synth_frame(seed: int, spec: SceneSpec, frame_id: str | None = None) -> FrameRecord:
    """Generate one frame deterministically from ``seed``.

    Blobs are placed at integer cell centers with rejection sampling so
    their boxes stay inside the cube and do not overlap each other; raises
    GenerationError when the scene cannot be realized.
    """
    rng = np.random.default_rng(seed)
    shape = spec.shape
    if spec.noise_level > 0:
        values = rng.uniform(0.0, spec.noise_level, size=shape).astype(np.float32)
    else:
        values = np.zeros(shape, dtype=np.float32)

    annotations: list[Annotation3D] = []
    placed: list[np.ndarray] = []
    for _ in range(spec.num_targets):
        for attempt in range(_PLACEMENT_TRIES):
            size = np.array([rng.uniform(lo, hi) for lo, hi in spec.size_range])
            half = size / 2.0
            lo_c = np.ceil(half).astype(int)
            hi_c = np.floor(np.asarray(shape) - half).astype(int)
            if (hi_c < lo_c).any():
                continue
            center = np.array([rng.integers(l, h + 1) for l, h in zip(lo_c, hi_c)],
                              dtype=np.float64)
            box = np.concatenate([center - half, center + half])
            if any(_boxes_overlap(box, other) for other in placed):
                continue
            break
        else:
            raise GenerationError(
                f"could not place target {len(annotations)} of {spec.num_targets} "
                f"in cube {shape} after {_PLACEMENT_TRIES} tries"
            )
        placed.append(box)

        if spec.class_mix is not None:
            class_id = int(rng.choice(spec.num_classes, p=spec.class_mix))
        else:
            class_id = int(rng.integers(0, spec.num_classes))
        peak = rng.uniform(*spec.peak_range)

        # paint only the cells the blob can touch
        lo_i = np.maximum(np.floor(box[:3]).astype(int), 0)
        hi_i = np.minimum(np.ceil(box[3:]).astype(int) + 1, shape)
        axes = [np.arange(lo_i[k], hi_i[k], dtype=np.float64) for k in range(3)]
        profs = [_profile(axes[k] - center[k], half[k]) for k in range(3)]
        blob = peak * profs[0][:, None, None] * profs[1][None, :, None] * profs[2][None, None, :]
        values[lo_i[0]:hi_i[0], lo_i[1]:hi_i[1], lo_i[2]:hi_i[2]] += blob.astype(np.float32)

        annotations.append(Annotation3D(class_id, tuple(center), tuple(size)))

    if frame_id is None:
        frame_id = f"synth_{seed:08d}"
    record = FrameRecord(RadCube(values), annotations, frame_id)
    record.validate(spec.num_classes)
    return record

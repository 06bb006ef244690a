"""RAD cube and annotation containers.

Axis convention, fixed repo-wide: a cube is indexed (range, azimuth,
Doppler) = (R, A, D); corner boxes are ordered (r1, a1, d1, r2, a2, d2);
the RA plane is (range, azimuth) and the RD plane is (range, Doppler).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RadCube:
    """Dense 3D magnitude array over (range, azimuth, Doppler)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"cube must be 3D (R, A, D), got shape {self.values.shape}")
        if min(self.values.shape) < 1:
            raise ValueError(f"cube shape components must be >= 1, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("cube contains NaN or Inf values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class Annotation3D:
    """Center-size 3D box in cube-cell units, plus its class id."""

    class_id: int
    center: tuple[float, float, float]  # (r, a, d)
    size: tuple[float, float, float]    # (w, h, depth) extents along (r, a, d)

    def __post_init__(self):
        self.class_id = int(self.class_id)
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in self.size)
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        if any(s <= 0 for s in self.size):
            raise ValueError(f"all size components must be > 0, got {self.size}")

    def corners(self) -> np.ndarray:
        """Corner-pair form (r1, a1, d1, r2, a2, d2)."""
        c = np.asarray(self.center, dtype=np.float64)
        half = np.asarray(self.size, dtype=np.float64) / 2.0
        return np.concatenate([c - half, c + half])

    def validate_against(self, cube_shape: tuple[int, int, int], num_classes: int | None = None):
        """Check the derived corner box lies inside [0,R]x[0,A]x[0,D]."""
        box = self.corners()
        lo, hi = box[:3], box[3:]
        bounds = np.asarray(cube_shape, dtype=np.float64)
        if (lo < -1e-9).any() or (hi > bounds + 1e-9).any():
            raise ValueError(
                f"annotation box {box.tolist()} exceeds cube bounds {cube_shape}"
            )
        if num_classes is not None and self.class_id >= num_classes:
            raise ValueError(
                f"class_id {self.class_id} out of range for {num_classes} classes"
            )


@dataclass
class FrameRecord:
    """One radar frame: cube, its annotations, and a string id."""

    cube: RadCube
    annotations: list[Annotation3D] = field(default_factory=list)
    frame_id: str = ""

    def validate(self, num_classes: int | None = None):
        for ann in self.annotations:
            ann.validate_against(self.cube.shape, num_classes)


def resize_doppler(cube: RadCube, target_d: int) -> RadCube:
    """Nearest-neighbor resize of the Doppler axis to ``target_d`` bins.

    Output plane k reads source plane floor(k * D / target_d); range and
    azimuth axes are untouched.
    """
    if target_d < 1:
        raise ValueError(f"target_d must be >= 1, got {target_d}")
    src_d = cube.shape[2]
    if target_d == src_d:
        return RadCube(cube.values.copy())
    idx = (np.arange(target_d) * src_d) // target_d
    return RadCube(cube.values[:, :, idx])


def rescale_annotations(ann: Annotation3D, src_d: int, target_d: int) -> Annotation3D:
    """Scale the Doppler center and depth by target_d / src_d."""
    if src_d < 1 or target_d < 1:
        raise ValueError(f"Doppler sizes must be >= 1, got {src_d} -> {target_d}")
    f = target_d / src_d
    r, a, d = ann.center
    w, h, depth = ann.size
    return Annotation3D(ann.class_id, (r, a, d * f), (w, h, depth * f))

"""Inverse-frequency class weights with a minimum-weight floor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ClassWeightConfig:
    counts: list[int] = field(default_factory=list)
    w_min: float = 0.05

    def __post_init__(self):
        if len(self.counts) == 0:
            raise ValueError("counts must be non-empty")
        if any(n < 0 for n in self.counts):
            raise ValueError(f"counts must be non-negative, got {self.counts}")


def compute_class_weights(cfg: ClassWeightConfig) -> np.ndarray:
    """Per-class weights: inverse frequency, floored at w_min, renormalized.

    w_i = (sum(N) - N_i) / sum_j(sum(N) - N_j), then w = max(w, w_min)
    elementwise, then w / sum(w).  The floor is applied once, before the
    final normalization, so a weight may end up slightly below w_min again.
    """
    counts = np.asarray(cfg.counts, dtype=np.float64)
    total = counts.sum()
    inv = total - counts
    denom = inv.sum()
    if denom <= 0:
        raise ValueError("class counts give a zero weight denominator")
    w = inv / denom
    w = np.maximum(w, cfg.w_min)
    return w / w.sum()

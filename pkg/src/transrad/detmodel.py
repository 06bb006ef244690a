"""Detection neck and heads.

The neck fuses the backbone pyramid top-down only: each coarser level is
upsampled (nearest, x2) and concatenated onto the next finer level before
a C2f block.  Four decoupled heads then predict, per level and per grid
cell: objectness (1), class logits (C), range-azimuth box distances as
distribution logits (4 * reg_max), and Doppler extents (2).

Anchors are the grid cells themselves: cell (i, j) of a stride-s level
has its center at ((i + 0.5) * s, (j + 0.5) * s) in (range, azimuth)
cube-cell units.  Flattened anchor order is level-major (P3, P4, P5),
row-major within a level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .backbone import Backbone, BackboneConfig, ConvBnAct, FeaturePyramid
from .errors import ConfigError


@dataclass
class NeckConfig:
    out_channels: list[int] = field(default_factory=lambda: [64, 128, 256])
    c2f_depth: int = 1

    def __post_init__(self):
        if len(self.out_channels) != 3:
            raise ConfigError("neck needs out_channels for exactly three levels")
        if self.c2f_depth < 1:
            raise ConfigError("c2f_depth must be >= 1")


class Bottleneck(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = ConvBnAct(channels, channels)
        self.conv2 = ConvBnAct(channels, channels)

    def forward(self, x):
        return x + self.conv2(self.conv1(x))


class C2f(nn.Module):
    """Split-transform-merge block: half the features pass through a
    bottleneck chain, every intermediate is concatenated back."""

    def __init__(self, c_in: int, c_out: int, depth: int = 1):
        super().__init__()
        self.hidden = c_out // 2
        self.cv1 = ConvBnAct(c_in, 2 * self.hidden, kernel=1)
        self.blocks = nn.ModuleList(Bottleneck(self.hidden) for _ in range(depth))
        self.cv2 = ConvBnAct((2 + depth) * self.hidden, c_out, kernel=1)

    def forward(self, x):
        parts = list(self.cv1(x).chunk(2, dim=1))
        for block in self.blocks:
            parts.append(block(parts[-1]))
        return self.cv2(torch.cat(parts, dim=1))


class Neck(nn.Module):
    """Top-down feature fusion; no bottom-up path."""

    def __init__(self, in_channels: list[int], cfg: NeckConfig | None = None):
        super().__init__()
        cfg = cfg or NeckConfig()
        self.cfg = cfg
        self.in_channels = list(in_channels)
        c3, c4, c5 = in_channels
        o3, o4, o5 = cfg.out_channels
        self.c2f_p5 = C2f(c5, o5, cfg.c2f_depth)
        self.c2f_p4 = C2f(c4 + o5, o4, cfg.c2f_depth)
        self.c2f_p3 = C2f(c3 + o4, o3, cfg.c2f_depth)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, pyr: FeaturePyramid) -> FeaturePyramid:
        if pyr.channels != self.in_channels:
            raise ConfigError(
                f"pyramid channels {pyr.channels} do not match neck inputs "
                f"{self.in_channels}"
            )
        p3, p4, p5 = pyr.maps
        n5 = self.c2f_p5(p5)
        n4 = self.c2f_p4(torch.cat([p4, self.up(n5)], dim=1))
        n3 = self.c2f_p3(torch.cat([p3, self.up(n4)], dim=1))
        return FeaturePyramid([n3, n4, n5], pyr.strides)


class TaskHead(nn.Module):
    """One prediction task: an independent conv stack per pyramid level."""

    def __init__(self, in_channels: list[int], width: int, out_channels: int):
        super().__init__()
        self.stacks = []
        for level, c_in in zip(("p3", "p4", "p5"), in_channels):
            stack = nn.Sequential(
                ConvBnAct(c_in, width),
                ConvBnAct(width, width),
                nn.Conv2d(width, out_channels, 1),
            )
            self.add_module(level, stack)
            self.stacks.append(stack)

    def forward(self, maps: list[Tensor]) -> list[Tensor]:
        return [stack(m) for stack, m in zip(self.stacks, maps)]


class Heads(nn.Module):
    def __init__(self, in_channels: list[int], num_classes: int,
                 reg_max: int = 16, width: int = 64):
        super().__init__()
        self.num_classes = num_classes
        self.reg_max = reg_max
        self.obj = TaskHead(in_channels, width, 1)
        self.cls = TaskHead(in_channels, width, num_classes)
        self.box = TaskHead(in_channels, width, 4 * reg_max)
        self.dopl = TaskHead(in_channels, width, 2)
        # start objectness/class probabilities low
        for head in (self.obj, self.cls):
            for stack in head.stacks:
                nn.init.constant_(stack[-1].bias, -2.0)
        # bias the distance bins toward small boxes at the start
        ramp = -torch.arange(reg_max, dtype=torch.float32).repeat(4)
        for stack in self.box.stacks:
            with torch.no_grad():
                stack[-1].bias.copy_(ramp)

    def forward(self, fused: FeaturePyramid) -> "RawPredictions":
        maps = fused.maps
        return RawPredictions(
            obj=self.obj(maps),
            cls=self.cls(maps),
            box=self.box(maps),
            dopl=self.dopl(maps),
            strides=tuple(fused.strides),
            reg_max=self.reg_max,
            num_classes=self.num_classes,
        )


@dataclass
class RawPredictions:
    """Per-level head outputs (NCHW tensors, one entry per pyramid level)."""

    obj: list[Tensor]
    cls: list[Tensor]
    box: list[Tensor]
    dopl: list[Tensor]
    strides: tuple[int, ...]
    reg_max: int
    num_classes: int

    @property
    def grid_shapes(self) -> list[tuple[int, int]]:
        return [tuple(t.shape[-2:]) for t in self.obj]


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    neck: NeckConfig = field(default_factory=NeckConfig)
    num_classes: int = 6
    reg_max: int = 16
    head_width: int = 64


class Detector(nn.Module):
    """Backbone -> neck -> decoupled heads."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        self.neck = Neck(cfg.backbone.stage_dims[1:], cfg.neck)
        self.head = Heads(cfg.neck.out_channels, cfg.num_classes,
                          cfg.reg_max, cfg.head_width)

    def forward(self, x: Tensor) -> RawPredictions:
        return self.head(self.neck(self.backbone(x)))


# ---------------------------------------------------------------------------
# anchor geometry and flattening
# ---------------------------------------------------------------------------

def anchor_centers(grid_shapes: list[tuple[int, int]], strides: tuple[int, ...],
                   device=None, dtype=torch.float32) -> tuple[Tensor, Tensor]:
    """Cell centers (N, 2) in (r, a) cube-cell units and per-anchor strides (N,)."""
    centers, anchor_strides = [], []
    for (h, w), s in zip(grid_shapes, strides):
        r = (torch.arange(h, device=device, dtype=dtype) + 0.5) * s
        a = (torch.arange(w, device=device, dtype=dtype) + 0.5) * s
        grid = torch.stack(torch.meshgrid(r, a, indexing="ij"), dim=-1)
        centers.append(grid.reshape(-1, 2))
        anchor_strides.append(torch.full((h * w,), float(s), device=device, dtype=dtype))
    return torch.cat(centers), torch.cat(anchor_strides)


def _flatten(t: Tensor) -> Tensor:
    # (B, C, H, W) -> (B, H*W, C)
    return t.flatten(2).transpose(1, 2)


def flatten_predictions(preds: RawPredictions) -> dict[str, Tensor]:
    """Concatenate all levels into per-anchor rows (level-major, row-major)."""
    return {
        "obj": torch.cat([_flatten(t) for t in preds.obj], dim=1).squeeze(-1),
        "cls": torch.cat([_flatten(t) for t in preds.cls], dim=1),
        "box": torch.cat([_flatten(t) for t in preds.box], dim=1),
        "dopl": torch.cat([_flatten(t) for t in preds.dopl], dim=1),
    }

"""Light retentive-transformer backbone emitting a three-level pyramid.

The Doppler axis of the input cube is treated as the channel axis, so the
backbone sees a 2D range-azimuth image with D channels.  Four stages at
embedding dims (32, 64, 128, 256) run behind a stride-4 stem; stride-2
patch merges sit between stages, and the last three stage outputs form
the pyramid at strides (8, 16, 32).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .errors import ConfigError
from .masa import ManhattanSelfAttention, default_gammas


@dataclass
class BackboneConfig:
    stage_dims: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    stage_blocks: list[int] = field(default_factory=lambda: [2, 2, 8, 2])
    stage_heads: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    decomposed_stages: tuple[int, ...] = (0, 1, 2)
    ffn_expansion: float = 4.0
    input_channels: int = 256
    lce_kernel: int = 5

    def __post_init__(self):
        n = len(self.stage_dims)
        if n != 4 or len(self.stage_blocks) != n or len(self.stage_heads) != n:
            raise ConfigError("backbone needs four stages of dims/blocks/heads")
        if (n - 1) in self.decomposed_stages:
            raise ConfigError("the last stage must use full (non-decomposed) attention")
        for dim, heads in zip(self.stage_dims, self.stage_heads):
            if dim % heads != 0:
                raise ConfigError(f"stage dim {dim} not divisible by {heads} heads")
        if self.ffn_expansion <= 0:
            raise ConfigError("ffn_expansion must be positive")


@dataclass
class FeaturePyramid:
    """Three feature maps (NCHW tensors) at strides 8, 16, 32."""

    maps: list[Tensor]
    strides: tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        if len(self.maps) != 3:
            raise ValueError(f"expected 3 pyramid levels, got {len(self.maps)}")
        for finer, coarser in zip(self.maps, self.maps[1:]):
            if finer.shape[-2:] != tuple(2 * s for s in coarser.shape[-2:]):
                raise ValueError(
                    f"pyramid spatial dims must halve level to level: "
                    f"{finer.shape[-2:]} -> {coarser.shape[-2:]}"
                )

    @property
    def channels(self) -> list[int]:
        return [m.shape[1] for m in self.maps]


class ConvBnAct(nn.Module):
    """3x3 (or given) convolution + batch norm + SiLU."""

    def __init__(self, c_in, c_out, kernel=3, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel, stride, kernel // 2, bias=False)
        self.bn = nn.BatchNorm2d(c_out)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class PatchEmbed(nn.Module):
    """Stem of four 3x3 convolutions; convs 1 and 3 downsample (total stride 4)."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = ConvBnAct(in_channels, out_channels, stride=2)
        self.conv2 = ConvBnAct(out_channels, out_channels)
        self.conv3 = ConvBnAct(out_channels, out_channels, stride=2)
        self.conv4 = ConvBnAct(out_channels, out_channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-2] % 32 or x.shape[-1] % 32:
            raise ConfigError(
                f"spatial dims must be divisible by 32 so every stage stride "
                f"divides evenly, got {tuple(x.shape[-2:])}"
            )
        return self.conv4(self.conv3(self.conv2(self.conv1(x))))


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: float):
        super().__init__()
        hidden = int(round(dim * expansion))
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class RMTBlock(nn.Module):
    """Residual block: conditional position encoding, attention, FFN.

    Operates channels-last on (B, H, W, C).
    """

    def __init__(self, dim: int, num_heads: int, decomposed: bool,
                 ffn_expansion: float, lce_kernel: int = 5,
                 gammas: list[float] | None = None):
        super().__init__()
        self.cpe = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = ManhattanSelfAttention(
            dim, num_heads, gammas=gammas or default_gammas(num_heads),
            decomposed=decomposed, lce_kernel=lce_kernel,
        )
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_expansion)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.cpe(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        x = x + self.attn(self.norm1(x))
        x = x + self.ffn(self.norm2(x))
        return x


class Stage(nn.Module):
    def __init__(self, blocks: list[RMTBlock]):
        super().__init__()
        self.blocks = blocks
        for j, block in enumerate(blocks):
            self.add_module(f"block{j}", block)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class PatchMerge(nn.Module):
    """Single stride-2 3x3 convolution to the next stage dim."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, 2, 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ConfigError(f"patch merge needs even spatial dims, got {tuple(x.shape[-2:])}")
        return self.conv(x)


class Backbone(nn.Module):
    """Stem + four attention stages; returns the last three as a pyramid."""

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        cfg = cfg or BackboneConfig()
        self.cfg = cfg
        self.stem = PatchEmbed(cfg.input_channels, cfg.stage_dims[0])
        self.stages: list[Stage] = []
        self.merges: list[PatchMerge] = []
        for i, (dim, blocks, heads) in enumerate(
            zip(cfg.stage_dims, cfg.stage_blocks, cfg.stage_heads)
        ):
            stage = Stage([
                RMTBlock(dim, heads, i in cfg.decomposed_stages,
                         cfg.ffn_expansion, cfg.lce_kernel)
                for _ in range(blocks)
            ])
            self.add_module(f"stage{i}", stage)
            self.stages.append(stage)
            if i + 1 < len(cfg.stage_dims):
                merge = PatchMerge(dim, cfg.stage_dims[i + 1])
                self.add_module(f"merge{i}", merge)
                self.merges.append(merge)

    def forward(self, x: Tensor) -> FeaturePyramid:
        """x: (B, C_in, H, W) with H, W divisible by 32."""
        if x.shape[1] != self.cfg.input_channels:
            raise ConfigError(
                f"expected {self.cfg.input_channels} input channels, got {x.shape[1]}"
            )
        feat = self.stem(x)
        outputs = []
        for i, stage in enumerate(self.stages):
            feat = stage(feat.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
            if i >= 1:
                outputs.append(feat)
            if i < len(self.merges):
                feat = self.merges[i](feat)
        return FeaturePyramid(outputs)


def cube_to_input(values, device=None) -> Tensor:
    """(R, A, D) cube array -> (1, D, R, A) model input tensor."""
    t = torch.as_tensor(values, dtype=torch.float32, device=device)
    return t.permute(2, 0, 1).unsqueeze(0)

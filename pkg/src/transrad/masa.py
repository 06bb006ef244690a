"""Retention and Manhattan self-attention primitives.

Attention scores are modulated by an explicit spatial prior: a matrix of
per-pair decay factors ``gamma ** distance``, where distance is the token
separation (1D, causal or bidirectional) or the Manhattan distance on the
2D token grid.  Tokens on an (H, W) grid are enumerated row-major, so
token ``n`` sits at row ``n // W``, column ``n % W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .errors import ConfigError


def default_gammas(num_heads: int) -> list[float]:
    """Per-head decay schedule 1 - 2**-(3+i): tighter heads first."""
    return [1.0 - 2.0 ** -(3 + i) for i in range(num_heads)]


@dataclass
class MasaConfig:
    num_heads: int
    head_dim: int
    gamma_per_head: list[float] = field(default_factory=list)
    decomposed: bool = False

    def __post_init__(self):
        if not self.gamma_per_head:
            self.gamma_per_head = default_gammas(self.num_heads)
        if len(self.gamma_per_head) != self.num_heads:
            raise ConfigError(
                f"{len(self.gamma_per_head)} gammas for {self.num_heads} heads"
            )
        if any(not (0.0 < g < 1.0) for g in self.gamma_per_head):
            raise ConfigError(f"head gammas must lie in (0, 1), got {self.gamma_per_head}")


# ---------------------------------------------------------------------------
# decay matrices
# ---------------------------------------------------------------------------

@dataclass
class DecayMatrix:
    """An N x N matrix of decay factors plus the form it was built in."""

    values: Tensor
    form: str  # temporal | bidirectional-1d | manhattan-2d | axial-H | axial-W
    gamma: float


def _check_gamma(gamma: float):
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")


def temporal_decay_matrix(length: int, gamma: float, *,
                          dtype=torch.float32, device=None) -> DecayMatrix:
    """Causal decay: D[n, m] = gamma**(n-m) for n >= m, else 0."""
    _check_gamma(gamma)
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    idx = torch.arange(length, dtype=dtype, device=device)
    diff = idx[:, None] - idx[None, :]
    values = torch.where(diff >= 0, torch.pow(torch.as_tensor(gamma, dtype=dtype, device=device), diff),
                         torch.zeros((), dtype=dtype, device=device))
    return DecayMatrix(values, "temporal", gamma)


def _abs_distance_decay(length: int, gamma: float, dtype, device) -> Tensor:
    idx = torch.arange(length, dtype=dtype, device=device)
    dist = (idx[:, None] - idx[None, :]).abs()
    return torch.pow(torch.as_tensor(gamma, dtype=dtype, device=device), dist)


def bidirectional_decay_matrix(length: int, gamma: float, *,
                               dtype=torch.float32, device=None) -> DecayMatrix:
    """Symmetric 1D decay: D[n, m] = gamma**|n - m|."""
    _check_gamma(gamma)
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    return DecayMatrix(_abs_distance_decay(length, gamma, dtype, device),
                       "bidirectional-1d", gamma)


def spatial_decay_matrix(H: int, W: int, gamma: float, *,
                         dtype=torch.float32, device=None) -> DecayMatrix:
    """2D decay over the row-major token grid: gamma**(Manhattan distance)."""
    _check_gamma(gamma)
    if H < 1 or W < 1:
        raise ValueError(f"grid dims must be >= 1, got ({H}, {W})")
    rows = torch.arange(H, device=device).repeat_interleave(W)
    cols = torch.arange(W, device=device).repeat(H)
    dist = (rows[:, None] - rows[None, :]).abs() + (cols[:, None] - cols[None, :]).abs()
    values = torch.pow(torch.as_tensor(gamma, dtype=dtype, device=device), dist.to(dtype))
    return DecayMatrix(values, "manhattan-2d", gamma)


def axial_decay_matrices(H: int, W: int, gamma: float, *,
                         dtype=torch.float32, device=None) -> tuple[DecayMatrix, DecayMatrix]:
    """Per-axis decay pair: (H x H over rows, W x W over columns)."""
    _check_gamma(gamma)
    if H < 1 or W < 1:
        raise ValueError(f"grid dims must be >= 1, got ({H}, {W})")
    d_h = DecayMatrix(_abs_distance_decay(H, gamma, dtype, device), "axial-H", gamma)
    d_w = DecayMatrix(_abs_distance_decay(W, gamma, dtype, device), "axial-W", gamma)
    return d_h, d_w


# ---------------------------------------------------------------------------
# 1D retention reference
# ---------------------------------------------------------------------------

@dataclass
class RetentionParams:
    """Projections, rotation angles, and decay for 1D retention."""

    w_q: Tensor  # (d_model, d_head)
    w_k: Tensor  # (d_model, d_head)
    w_v: Tensor  # (d_model, d_value)
    theta: Tensor  # (d_head // 2,) rotation angle per feature pair
    gamma: float

    def __post_init__(self):
        _check_gamma(self.gamma)
        if self.w_q.shape != self.w_k.shape:
            raise ValueError("w_q and w_k shapes must match")
        d_head = self.w_q.shape[1]
        if d_head % 2 != 0:
            raise ValueError(f"head dim must be even for pair rotation, got {d_head}")
        if self.theta.shape != (d_head // 2,):
            raise ValueError(f"theta must have shape ({d_head // 2},), got {tuple(self.theta.shape)}")
        if self.w_v.shape[0] != self.w_q.shape[0]:
            raise ValueError("w_v input dim must match w_q")


def rotate_pairs(x: Tensor, angles: Tensor) -> Tensor:
    """Rotate consecutive feature pairs of x (N, d) by per-position angles (N, d/2)."""
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    cos, sin = angles.cos(), angles.sin()
    out = torch.stack([x_even * cos - x_odd * sin, x_even * sin + x_odd * cos], dim=-1)
    return out.flatten(-2)


def retention_1d(x: Tensor, params: RetentionParams) -> Tensor:
    """Parallel-form retention over a token sequence x of shape (N, d_model).

    Queries and keys are rotated per position by n * theta; the real
    inner product of two rotated pairs equals the real part of the
    complex product q * conj(k) * exp(i (n - m) theta), which realizes
    the conjugate in the complex formulation.  Scores are masked causal
    and decayed by gamma**(n-m); no softmax or scale is applied:
    out = (Q K^T * D) V.
    """
    if x.dim() != 2 or x.shape[0] < 1:
        raise ValueError(f"x must be (N, d_model) with N >= 1, got {tuple(x.shape)}")
    if x.shape[1] != params.w_q.shape[0]:
        raise ValueError(
            f"x feature dim {x.shape[1]} does not match projections {params.w_q.shape[0]}"
        )
    n = x.shape[0]
    positions = torch.arange(n, dtype=x.dtype, device=x.device)
    angles = positions[:, None] * params.theta[None, :]
    q = rotate_pairs(x @ params.w_q, angles)
    k = rotate_pairs(x @ params.w_k, angles)
    v = x @ params.w_v
    decay = temporal_decay_matrix(n, params.gamma, dtype=x.dtype, device=x.device).values
    return (q @ k.transpose(0, 1) * decay) @ v


# ---------------------------------------------------------------------------
# Manhattan self-attention on 2D feature maps
# ---------------------------------------------------------------------------

class ManhattanSelfAttention(nn.Module):
    """Softmax attention modulated by per-head spatial decay, plus a
    depthwise-conv local-context branch on the value projection.

    Full form attends over all H*W tokens with the 2D Manhattan decay;
    the decomposed form attends along rows (per-axis decay over columns)
    and then along columns, reusing the same Q/K projections for both
    axes.  Scores are scaled by 1/sqrt(head_dim) before the softmax; the
    decay multiplies the softmaxed weights, so row sums are generally
    below 1.
    """

    def __init__(self, dim: int, num_heads: int, gammas: list[float] | None = None,
                 decomposed: bool = False, lce_kernel: int = 5):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigError(f"dim {dim} not divisible by {num_heads} heads")
        if lce_kernel % 2 == 0:
            raise ConfigError(f"LCE kernel must be odd, got {lce_kernel}")
        gammas = list(gammas) if gammas is not None else default_gammas(num_heads)
        if len(gammas) != num_heads:
            raise ConfigError(f"{len(gammas)} gammas for {num_heads} heads")
        for g in gammas:
            _check_gamma(g)
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.gammas = gammas
        self.decomposed = decomposed
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.lce = nn.Conv2d(dim, dim, lce_kernel, padding=lce_kernel // 2,
                             groups=dim, padding_mode="replicate")
        self._decay_cache: dict = {}

    @classmethod
    def from_config(cls, cfg: MasaConfig) -> "ManhattanSelfAttention":
        return cls(cfg.num_heads * cfg.head_dim, cfg.num_heads,
                   gammas=cfg.gamma_per_head, decomposed=cfg.decomposed)

    # -- decay helpers ------------------------------------------------------

    def _stacked_decay(self, builder, *sizes, dtype, device) -> Tensor:
        key = (builder.__name__, sizes, dtype, device)
        if key not in self._decay_cache:
            mats = [builder(*sizes, g, dtype=dtype, device=device).values
                    for g in self.gammas]
            self._decay_cache[key] = torch.stack(mats)
        return self._decay_cache[key]

    def _axial_decay(self, length: int, dtype, device) -> Tensor:
        key = ("axial", length, dtype, device)
        if key not in self._decay_cache:
            mats = [_abs_distance_decay(length, g, dtype, device) for g in self.gammas]
            self._decay_cache[key] = torch.stack(mats)
        return self._decay_cache[key]

    # -- attention paths ----------------------------------------------------

    def _split_heads(self, t: Tensor) -> Tensor:
        # (B, ..., C) -> (B, heads, ..., head_dim)
        b, *mid, _ = t.shape
        t = t.view(b, *mid, self.num_heads, self.head_dim)
        return t.movedim(-2, 1)

    def attend_tokens(self, tokens: Tensor, decay: Tensor) -> Tensor:
        """Decayed softmax attention over a token batch.

        tokens: (B, N, C); decay: (heads, N, N) applied after the softmax.
        Returns (B, N, C) after head concat and output projection.
        """
        q = self._split_heads(self.q_proj(tokens))
        k = self._split_heads(self.k_proj(tokens))
        v = self._split_heads(self.v_proj(tokens))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        weights = scores.softmax(dim=-1) * decay.unsqueeze(0)
        out = weights @ v
        out = out.movedim(1, -2).flatten(-2)
        return self.out_proj(out)

    def full_attention(self, x: Tensor) -> Tensor:
        """Global attention with the 2D Manhattan decay; x is (B, H, W, C)."""
        b, h, w, c = x.shape
        decay = self._stacked_decay(spatial_decay_matrix, h, w,
                                    dtype=x.dtype, device=x.device)
        out = self.attend_tokens(x.reshape(b, h * w, c), decay)
        return out.view(b, h, w, c)

    def decomposed_attention(self, x: Tensor) -> Tensor:
        """Axial attention: along rows first, then along columns."""
        b, h, w, c = x.shape
        q = self._split_heads(self.q_proj(x))  # (B, heads, H, W, hd)
        k = self._split_heads(self.k_proj(x))
        v = self._split_heads(self.v_proj(x))
        scale = math.sqrt(self.head_dim)

        decay_w = self._axial_decay(w, x.dtype, x.device)  # (heads, W, W)
        attn_w = (q @ k.transpose(-1, -2) / scale).softmax(dim=-1)
        attn_w = attn_w * decay_w[None, :, None]
        mixed = attn_w @ v  # (B, heads, H, W, hd)

        decay_h = self._axial_decay(h, x.dtype, x.device)  # (heads, H, H)
        q_c, k_c = q.transpose(2, 3), k.transpose(2, 3)  # (B, heads, W, H, hd)
        attn_h = (q_c @ k_c.transpose(-1, -2) / scale).softmax(dim=-1)
        attn_h = attn_h * decay_h[None, :, None]
        out = attn_h @ mixed.transpose(2, 3)  # (B, heads, W, H, hd)

        out = out.transpose(2, 3).movedim(1, -2).flatten(-2)  # (B, H, W, C)
        return self.out_proj(out)

    def attention(self, x: Tensor) -> Tensor:
        """MaSA without the local-context branch (decomposed or full)."""
        return self.decomposed_attention(x) if self.decomposed else self.full_attention(x)

    def values(self, x: Tensor) -> Tensor:
        return self.v_proj(x)

    def local_context(self, v: Tensor) -> Tensor:
        """Depthwise convolution of the value map; v is (B, H, W, C)."""
        return self.lce(v.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)

    def forward(self, x: Tensor) -> Tensor:
        """Attention output plus local context: MaSA(x) + LCE(V)."""
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        out = self.attention(x) + self.local_context(self.values(x))
        return out.squeeze(0) if squeeze else out


# functional aliases over an existing module's weights

def masa_core(x: Tensor, attn: ManhattanSelfAttention) -> Tensor:
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    out = attn.full_attention(x)
    return out.squeeze(0) if squeeze else out


def masa_decomposed(x: Tensor, attn: ManhattanSelfAttention) -> Tensor:
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    out = attn.decomposed_attention(x)
    return out.squeeze(0) if squeeze else out


def lce(v: Tensor, attn: ManhattanSelfAttention) -> Tensor:
    squeeze = v.dim() == 3
    if squeeze:
        v = v.unsqueeze(0)
    out = attn.local_context(v)
    return out.squeeze(0) if squeeze else out


def masa_out(x: Tensor, attn: ManhattanSelfAttention) -> Tensor:
    return attn(x)

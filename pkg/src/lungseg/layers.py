"""Differentiable building blocks shared by the segmenter and the detector.

Thin wrappers around torch ops that pin down the contracts the rest of the
project relies on: exact shape rules for the conv/upsample stages, masked
attention with exactly-zero weight on masked positions, fan-in-scaled
deterministic initialization, and finite-value guards.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class NumericError(RuntimeError):
    """A forward or backward pass produced a non-finite value."""


class DegenerateAttentionError(ValueError):
    """An attention row had every key masked out."""


def assert_finite(tensor: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        bad = (~torch.isfinite(tensor)).nonzero()[0].tolist()
        raise NumericError(f"{name} has a non-finite entry at index {bad}")
    return tensor


def scaled_dot_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax(Q K^T / sqrt(d)) V with optional boolean mask over keys.

    Shapes broadcast over leading dims: queries (..., n_q, d), keys
    (..., n_k, d), values (..., n_k, d_v), mask (..., n_q, n_k) with True on
    positions that may attend. Masked positions get exactly zero weight;
    a row with every position masked raises DegenerateAttentionError.

    Returns (output (..., n_q, d_v), weights (..., n_q, n_k)).
    """
    d = queries.shape[-1]
    if d <= 0 or keys.shape[-1] != d:
        raise ValueError(f"query/key dims must match and be positive, got {d} and {keys.shape[-1]}")
    logits = queries @ keys.transpose(-2, -1) / math.sqrt(d)
    if mask is not None:
        mask = mask.broadcast_to(logits.shape)
        if not mask.any(dim=-1).all():
            raise DegenerateAttentionError("degenerate attention row: all keys masked")
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return weights @ values, weights


def nearest_upsample_2x(x: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor 2x spatial upsampling of (..., C, h, w)."""
    return F.interpolate(x, scale_factor=2, mode="nearest")


class ConvStage(nn.Module):
    """3x3 convolution, strided downsampling by 2 or 4, pointwise nonlinearity.

    (C_in, H, W) -> (C_out, H/s, W/s); H and W must be divisible by s.
    """

    def __init__(self, c_in: int, c_out: int, stride: int, activation: str = "gelu"):
        super().__init__()
        if stride not in (2, 4):
            raise ValueError(f"stride must be 2 or 4, got {stride}")
        self.stride = stride
        self.conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1)
        self.act = nn.GELU() if activation == "gelu" else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"spatial size {h}x{w} not divisible by stride {self.stride}")
        return self.act(self.conv(x))


class UpsampleMerge(nn.Module):
    """Upsample the coarse map 2x, concat the skip, convolve to C_out.

    low (C_low, h, w) + skip (C_skip, 2h, 2w) -> (C_out, 2h, 2w).
    """

    def __init__(self, c_low: int, c_skip: int, c_out: int, activation: str = "gelu"):
        super().__init__()
        self.conv = nn.Conv2d(c_low + c_skip, c_out, kernel_size=3, padding=1)
        self.act = nn.GELU() if activation == "gelu" else nn.Identity()

    def forward(self, low: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        lh, lw = low.shape[-2:]
        sh, sw = skip.shape[-2:]
        if (sh, sw) != (2 * lh, 2 * lw):
            raise ValueError(
                f"skip spatial dims {sh}x{sw} must be exactly double low's {lh}x{lw}"
            )
        up = nearest_upsample_2x(low)
        return self.act(self.conv(torch.cat([up, skip], dim=-3)))


class MultiheadCrossAttention(nn.Module):
    """Multi-head attention with separate query and key/value input widths.

    The value path (v_proj then out_proj) is the only route by which key/value
    content reaches the output, so zeroing v_proj makes the module's output
    independent of the key/value input.
    """

    def __init__(self, q_dim: int, kv_dim: int, attn_dim: int, heads: int, out_dim: int):
        super().__init__()
        if attn_dim % heads:
            raise ValueError(f"attn_dim {attn_dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = attn_dim // heads
        self.q_proj = nn.Linear(q_dim, attn_dim)
        self.k_proj = nn.Linear(kv_dim, attn_dim)
        self.v_proj = nn.Linear(kv_dim, attn_dim)
        self.out_proj = nn.Linear(attn_dim, out_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.view(*lead, n, self.heads, self.head_dim).transpose(-3, -2)

    def forward(
        self,
        queries: torch.Tensor,
        kv: torch.Tensor,
        key_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """queries (..., n_q, q_dim), kv (..., n_k, kv_dim), key_mask (..., n_k).

        Returns (output (..., n_q, out_dim), weights (..., heads, n_q, n_k)).
        """
        q = self._split(self.q_proj(queries))
        k = self._split(self.k_proj(kv))
        v = self._split(self.v_proj(kv))
        mask = None
        if key_mask is not None:
            mask = key_mask.unsqueeze(-2).unsqueeze(-2)  # (..., 1, 1, n_k)
        out, weights = scaled_dot_attention(q, k, v, mask)
        out = out.transpose(-3, -2)
        out = out.reshape(*out.shape[:-2], -1)
        return self.out_proj(out), weights


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden_mult: int = 2):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden_mult * dim), nn.GELU(), nn.Linear(hidden_mult * dim, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class SelfAttentionBlock(nn.Module):
    """Post-norm transformer block: self-attention then feed-forward."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = MultiheadCrossAttention(dim, dim, dim, heads, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        attn_out, _ = self.attn(x, x, key_mask)
        x = self.norm1(x + attn_out)
        return self.norm2(x + self.ff(x))


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic init: fan-in-scaled uniform weights, zero biases.

    LayerNorm scales are set to one. Iteration follows the module's
    parameter registration order, so the same architecture and seed always
    produce identical values.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() >= 2:
                fan_in = p[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                vals = torch.empty(p.shape, dtype=torch.float64)
                vals.uniform_(-bound, bound, generator=gen)
                p.copy_(vals.to(p.dtype))
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()

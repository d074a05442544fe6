"""Zone detector: finds which of the six lung zones contain lesions and
synthesizes a report from the result.

Detection-style topology: a three-stage conv backbone (strides 4, 2, 2),
self-attention over the coarsest feature map, cross-scale fusion of the
coarse map into the middle one, then a fixed set of learned query vectors
cross-attends to the fused features through two decoder layers, producing
one feature row per query. A per-region attention aggregation turns the
query rows into six region features: for region query q, the feature is
softmax(X q^T) X, a convex combination of the rows of X. Per-region linear
heads and a sigmoid give the six probabilities; thresholding gives the hard
label, and the report is synthesized from it.

Supervision is the six-label binary cross-entropy; labels come from
reports, so the localization is only weakly supervised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .layers import (
    ConvStage,
    FeedForward,
    MultiheadCrossAttention,
    SelfAttentionBlock,
    init_parameters,
    nearest_upsample_2x,
)
from .regions import N_REGIONS
from .reports import synthesize_report

BCE_EPS = 1e-7


def aggregate_by_region(
    x: torch.Tensor, queries: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Attention-pool query rows into one feature per region.

    x (..., n, d) and queries (r, d) -> (features (..., r, d), weights
    (..., r, n)). Weights are softmax(x @ q) over the n rows, no temperature,
    so every output row is a convex combination of rows of x.
    """
    if x.shape[-1] != queries.shape[-1]:
        raise ValueError(
            f"feature dim mismatch: rows have {x.shape[-1]}, queries {queries.shape[-1]}"
        )
    logits = torch.einsum("...nd,rd->...rn", x, queries)
    weights = torch.softmax(logits, dim=-1)
    return torch.einsum("...rn,...nd->...rd", weights, x), weights


def bce_loss(p, y) -> torch.Tensor:
    """Mean binary cross-entropy over the six labels (and any batch dims).

    Probabilities are clamped to [1e-7, 1 - 1e-7]; labels must be exactly
    0 or 1.
    """
    p = torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
    y = torch.as_tensor(y, dtype=p.dtype) if not torch.is_tensor(y) else y.to(p.dtype)
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


@dataclass
class DetectorConfig:
    image_size: int = 64
    widths: tuple = (16, 32, 64)
    d_model: int = 64
    n_queries: int = 10
    heads: int = 4
    decoder_layers: int = 2

    def to_dict(self) -> dict:
        return {
            "model": "detector",
            "image_size": str(self.image_size),
            "widths": ",".join(str(w) for w in self.widths),
            "d_model": str(self.d_model),
            "n_queries": str(self.n_queries),
            "heads": str(self.heads),
            "decoder_layers": str(self.decoder_layers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(
            image_size=int(d["image_size"]),
            widths=tuple(int(w) for w in d["widths"].split(",")),
            d_model=int(d["d_model"]),
            n_queries=int(d["n_queries"]),
            heads=int(d["heads"]),
            decoder_layers=int(d["decoder_layers"]),
        )


@dataclass
class DetectorOutput:
    probabilities: np.ndarray  # (6,)
    hard_label: tuple
    threshold: float


class QueryDecoderLayer(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.cross = MultiheadCrossAttention(d_model, d_model, d_model, heads, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, queries: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        attn_out, _ = self.cross(queries, memory)
        queries = self.norm1(queries + attn_out)
        return self.norm2(queries + self.ff(queries))


class ZoneDetector(nn.Module):
    def __init__(self, cfg: DetectorConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or DetectorConfig()
        w = self.cfg.widths
        d = self.cfg.d_model
        self.backbone = nn.ModuleList(
            [ConvStage(1, w[0], 4), ConvStage(w[0], w[1], 2), ConvStage(w[1], w[2], 2)]
        )
        coarse_side = self.cfg.image_size // 16
        self.coarse_proj = nn.Linear(w[2], d)
        self.coarse_pos = nn.Parameter(torch.zeros(coarse_side * coarse_side, d))
        self.coarse_attn = SelfAttentionBlock(d, self.cfg.heads)
        self.fuse_conv = nn.Conv2d(d + w[1], d, kernel_size=3, padding=1)
        self.fuse_act = nn.GELU()
        self.object_queries = nn.Parameter(torch.zeros(self.cfg.n_queries, d))
        self.decoder = nn.ModuleList(
            QueryDecoderLayer(d, self.cfg.heads) for _ in range(self.cfg.decoder_layers)
        )
        self.region_queries = nn.Parameter(torch.zeros(N_REGIONS, d))
        self.head_weight = nn.Parameter(torch.zeros(N_REGIONS, d))
        self.head_bias = nn.Parameter(torch.zeros(N_REGIONS))
        init_parameters(self, seed)

    def detect(self, image: torch.Tensor) -> torch.Tensor:
        """image (B, 1, H, W) -> query features (B, n_queries, d_model)."""
        h, w = image.shape[-2:]
        if h != w or h % 16:
            raise ValueError(f"image must be square with side divisible by 16, got {h}x{w}")
        feats = []
        x = image
        for stage in self.backbone:
            x = stage(x)
            feats.append(x)
        mid, coarse = feats[1], feats[2]
        b, c, ch, cw = coarse.shape
        flat = coarse.flatten(-2).transpose(-1, -2)  # (B, ch*cw, C)
        flat = self.coarse_proj(flat) + self.coarse_pos
        flat = self.coarse_attn(flat)
        coarse = flat.transpose(-1, -2).reshape(b, -1, ch, cw)
        fused = self.fuse_act(
            self.fuse_conv(torch.cat([nearest_upsample_2x(coarse), mid], dim=-3))
        )
        memory = fused.flatten(-2).transpose(-1, -2)  # (B, n_pos, d)
        q = self.object_queries.expand(b, -1, -1)
        for layer in self.decoder:
            q = layer(q, memory)
        return q

    def aggregate(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return aggregate_by_region(x, self.region_queries)

    def probabilities(self, image: torch.Tensor) -> torch.Tensor:
        """image (B, 1, H, W) -> per-region probabilities (B, 6)."""
        features, _ = self.aggregate(self.detect(image))
        logits = (features * self.head_weight).sum(dim=-1) + self.head_bias
        return torch.sigmoid(logits)

    def _prep(self, image: np.ndarray) -> torch.Tensor:
        img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
        return img.reshape(1, 1, *img.shape[-2:])

    @torch.no_grad()
    def predict_labels(self, image: np.ndarray, threshold: float = 0.5) -> DetectorOutput:
        if not 0.0 < threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {threshold}")
        p = self.probabilities(self._prep(image))[0].numpy()
        hard = tuple(int(v >= threshold) for v in p)
        return DetectorOutput(probabilities=p, hard_label=hard, threshold=threshold)

    @torch.no_grad()
    def generate_report(self, image: np.ndarray, threshold: float = 0.5) -> str:
        """Report synthesized from the predicted hard label; always grammar-valid."""
        return synthesize_report(self.predict_labels(image, threshold).hard_label)

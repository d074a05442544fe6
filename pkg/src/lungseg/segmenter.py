"""Text-guided segmentation network.

A small U-Net-style model: a four-stage convolutional encoder (strides 4, 2,
2, 2, so a 224-pixel side ends at 7x7), a two-layer transformer text encoder
over the report grammar vocabulary, and a decoder that at every stage lets
the spatial positions attend to the text tokens (cross-modal attention,
added residually) before merging with the skip connection. A final 1-channel
convolution plus bilinear upsampling restores the input resolution.

Word importance is read off the coarsest decoder stage: attention weights
averaged over pixels and heads give one score per token, summing to one over
the real tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import (
    ConvStage,
    FeedForward,
    MultiheadCrossAttention,
    SelfAttentionBlock,
    UpsampleMerge,
    init_parameters,
)
from .reports import GRAMMAR_WORDS, tokenize

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
VOCAB: tuple[str, ...] = (PAD, CLS, UNK) + GRAMMAR_WORDS
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


def encode_tokens(
    text: str, max_tokens: int = 24
) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Token ids and attention mask for a report, padded/truncated to max_tokens.

    The sequence always starts with [CLS]; unknown words map to [UNK]. The
    mask is True exactly on real tokens.
    """
    tokens = [CLS] + tokenize(text)
    tokens = tokens[:max_tokens]
    ids = [WORD_TO_ID.get(t, WORD_TO_ID[UNK]) for t in tokens]
    n = len(ids)
    ids = ids + [WORD_TO_ID[PAD]] * (max_tokens - n)
    mask = [True] * n + [False] * (max_tokens - n)
    return (
        torch.tensor(ids, dtype=torch.long),
        torch.tensor(mask, dtype=torch.bool),
        tokens,
    )


@dataclass
class SegmenterConfig:
    image_size: int = 64
    widths: tuple = (16, 32, 64, 128)
    text_dim: int = 64
    heads: int = 4
    max_tokens: int = 24

    def to_dict(self) -> dict:
        return {
            "model": "segmenter",
            "image_size": str(self.image_size),
            "widths": ",".join(str(w) for w in self.widths),
            "text_dim": str(self.text_dim),
            "heads": str(self.heads),
            "max_tokens": str(self.max_tokens),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegmenterConfig":
        return cls(
            image_size=int(d["image_size"]),
            widths=tuple(int(w) for w in d["widths"].split(",")),
            text_dim=int(d["text_dim"]),
            heads=int(d["heads"]),
            max_tokens=int(d["max_tokens"]),
        )


class TextEncoder(nn.Module):
    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.token_embed = nn.Embedding(len(VOCAB), cfg.text_dim)
        self.pos_embed = nn.Embedding(cfg.max_tokens, cfg.text_dim)
        self.blocks = nn.ModuleList(
            [SelfAttentionBlock(cfg.text_dim, cfg.heads) for _ in range(2)]
        )

    def forward(
        self, ids: torch.Tensor, mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """ids, mask (B, L) -> per-token memory (B, L, d) and pooled mean (B, d)."""
        pos = torch.arange(ids.shape[-1], device=ids.device)
        x = self.token_embed(ids) + self.pos_embed(pos)
        for blk in self.blocks:
            x = blk(x, mask)
        denom = mask.sum(dim=-1, keepdim=True).clamp(min=1)
        pooled = (x * mask.unsqueeze(-1)).sum(dim=-2) / denom
        return x, pooled


class ImageEncoder(nn.Module):
    """Four conv stages at strides (4, 2, 2, 2); input side divisible by 32."""

    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        strides = (4, 2, 2, 2)
        chans = (1,) + tuple(cfg.widths)
        self.stages = nn.ModuleList(
            ConvStage(chans[i], chans[i + 1], strides[i]) for i in range(4)
        )

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        h, w = image.shape[-2:]
        if h != w:
            raise ValueError(f"image must be square, got {h}x{w}")
        if h % 32:
            raise ValueError(f"image side {h} must be divisible by 32")
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class GuidedDecoder(nn.Module):
    """Walks stages coarse-to-fine, fusing text into pixels at every stage."""

    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        w = cfg.widths
        # decoder feature widths per stage, coarsest first
        dec = (w[3], w[2], w[1], w[0])
        self.cross = nn.ModuleList(
            MultiheadCrossAttention(c, cfg.text_dim, cfg.text_dim, cfg.heads, c)
            for c in dec
        )
        self.merges = nn.ModuleList(
            [
                UpsampleMerge(w[3], w[2], w[2]),
                UpsampleMerge(w[2], w[1], w[1]),
                UpsampleMerge(w[1], w[0], w[0]),
            ]
        )
        self.head = nn.Conv2d(w[0], 1, kernel_size=3, padding=1)

    def forward(
        self,
        pyramid: list[torch.Tensor],
        memory: torch.Tensor,
        text_mask: torch.Tensor,
        need_weights: bool = False,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        x = pyramid[3]
        weights = []
        for i in range(4):
            b, c, h, w = x.shape
            flat = x.flatten(-2).transpose(-1, -2)  # (B, h*w, C)
            fused, attn = self.cross[i](flat, memory, text_mask)
            x = x + fused.transpose(-1, -2).reshape(b, c, h, w)
            if need_weights:
                weights.append(attn)
            if i < 3:
                x = self.merges[i](x, pyramid[2 - i])
        logits = self.head(x)
        logits = F.interpolate(
            logits, scale_factor=4, mode="bilinear", align_corners=False
        )
        return logits.squeeze(-3), weights


class TextGuidedSegmenter(nn.Module):
    def __init__(self, cfg: SegmenterConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or SegmenterConfig()
        self.image_encoder = ImageEncoder(self.cfg)
        self.text_encoder = TextEncoder(self.cfg)
        self.decoder = GuidedDecoder(self.cfg)
        init_parameters(self, seed)

    def encode_image(self, image: torch.Tensor) -> list[torch.Tensor]:
        return self.image_encoder(image)

    def encode_text(self, ids: torch.Tensor, mask: torch.Tensor):
        return self.text_encoder(ids, mask)

    def forward(
        self,
        image: torch.Tensor,
        ids: torch.Tensor,
        mask: torch.Tensor,
        need_weights: bool = False,
    ):
        """image (B, 1, H, W), ids/mask (B, L) -> logits (B, H, W) [+ weights]."""
        pyramid = self.encode_image(image)
        memory, _ = self.encode_text(ids, mask)
        return self.decoder(pyramid, memory, mask, need_weights)

    def zero_text_value_path(self) -> None:
        """Zero every text-to-value projection; output becomes report-independent."""
        with torch.no_grad():
            for attn in self.decoder.cross:
                attn.v_proj.weight.zero_()
                attn.v_proj.bias.zero_()

    # single-sample conveniences -------------------------------------------

    def _prep(self, image: np.ndarray, report: str):
        img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
        img = img.reshape(1, 1, *img.shape[-2:])
        ids, mask, tokens = encode_tokens(report, self.cfg.max_tokens)
        return img, ids.unsqueeze(0), mask.unsqueeze(0), tokens

    @torch.no_grad()
    def segment(self, image: np.ndarray, report: str) -> np.ndarray:
        """Segmentation logits (H, W) for one image/report pair."""
        img, ids, mask, _ = self._prep(image, report)
        logits, _ = self.forward(img, ids, mask)
        return logits[0].numpy()

    @torch.no_grad()
    def segment_probabilities(self, image: np.ndarray, report: str) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.segment(image, report)))

    @torch.no_grad()
    def word_importance(self, image: np.ndarray, report: str):
        """Per-token attention scores at the coarsest decoder stage.

        Scores are averaged over pixels and heads, zero on padding, and sum
        to one over the real tokens. Returns (tokens, scores over tokens).
        """
        img, ids, mask, tokens = self._prep(image, report)
        _, weights = self.forward(img, ids, mask, need_weights=True)
        coarse = weights[0]  # (B, heads, n_pix, L)
        scores = coarse.mean(dim=(1, 2))[0].numpy()
        return tokens, scores[: len(tokens)]

    @torch.no_grad()
    def attention_map(self, image: np.ndarray, report: str) -> np.ndarray:
        """Mean cross-modal attention per pixel at the finest decoder stage,
        upsampled to the input resolution (raw, not normalized)."""
        img, ids, mask, _ = self._prep(image, report)
        _, weights = self.forward(img, ids, mask, need_weights=True)
        fine = weights[-1]  # (B, heads, n_pix, L)
        n_real = int(mask.sum())
        per_pixel = fine[..., :n_real].mean(dim=(1, 3))  # (B, n_pix)
        side = int(np.sqrt(per_pixel.shape[-1]))
        field = per_pixel.reshape(1, 1, side, side)
        h = img.shape[-1]
        up = F.interpolate(field, size=(h, h), mode="bilinear", align_corners=False)
        return up[0, 0].numpy()

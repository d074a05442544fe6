"""Matplotlib figure rendering for training curves, ablation summaries,
attention panels, and word-importance heat strips. All figures go straight
to PNG files; nothing is shown interactively.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path: Path, provenance: str | None = None) -> Path:
    path = Path(path)
    meta = {"provenance": provenance} if provenance else None
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=meta)
    plt.close(fig)
    return path


def save_history_curves(history: list[dict], path: Path, provenance: str | None = None) -> Path:
    epochs = [row["epoch"] for row in history]
    metric_key = next(k for k in history[0] if k.startswith("val_"))
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    ax1.plot(epochs, [row["train_loss"] for row in history], color="tab:red", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [row[metric_key] for row in history], color="tab:blue", label=metric_key)
    ax2.set_ylabel(metric_key, color="tab:blue")
    fig.tight_layout()
    return _save(fig, path, provenance)


def save_mode_comparison(
    mode_dice: dict[str, float], path: Path, provenance: str | None = None
) -> Path:
    modes = list(mode_dice)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    bars = ax.bar(modes, [mode_dice[m] for m in modes], color="tab:blue")
    ax.set_ylabel("mean dice")
    ax.set_ylim(0, 1)
    for b, m in zip(bars, modes):
        ax.text(
            b.get_x() + b.get_width() / 2, b.get_height() + 0.01,
            f"{mode_dice[m]:.3f}", ha="center", fontsize=9,
        )
    fig.tight_layout()
    return _save(fig, path, provenance)


def save_heat_strip(
    tokens: list[str], scores: np.ndarray, path: Path, provenance: str | None = None
) -> Path:
    """One-row heatmap of per-token attention scores."""
    scores = np.asarray(scores, dtype=float).reshape(1, -1)
    fig, ax = plt.subplots(figsize=(max(3.0, 0.5 * len(tokens)), 1.6))
    ax.imshow(scores, aspect="auto", cmap="magma", vmin=0.0)
    ax.set_yticks([])
    ax.set_xticks(range(len(tokens)))
    ax.set_xticklabels(tokens, rotation=45, ha="right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path, provenance)


def save_attention_panels(
    image: np.ndarray,
    attention: np.ndarray,
    overlay: np.ndarray,
    path: Path,
    gt_mask: np.ndarray | None = None,
    provenance: str | None = None,
) -> Path:
    """Row of panels: input, ground truth (optional), attention, overlay."""
    panels = [("input", image, "gray")]
    if gt_mask is not None:
        panels.append(("ground truth", gt_mask, "gray"))
    panels.append(("attention", attention, "magma"))
    panels.append(("overlay", overlay, None))
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3.2))
    for ax, (title, data, cmap) in zip(np.atleast_1d(axes), panels):
        if cmap is None:
            ax.imshow(data)
        else:
            ax.imshow(data, cmap=cmap, vmin=0, vmax=1)
        ax.set_title(title, fontsize=10)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path, provenance)

"""Segmentation and zone-label metrics.

Conventions for empty cases are fixed project-wide: dice and jaccard are 1
when both masks are empty (blank-on-blank is a perfect prediction), and
per-region precision/recall/F1 are 1 when their numerator and denominator
are both zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .regions import N_REGIONS, REGIONS


def seg_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """(pixel accuracy, dice, jaccard) for two binary masks of equal shape."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    accuracy = float(np.mean(pred == gt))
    inter = int(np.logical_and(pred, gt).sum())
    p, g = int(pred.sum()), int(gt.sum())
    dice = 1.0 if p + g == 0 else 2.0 * inter / (p + g)
    union = p + g - inter
    jaccard = 1.0 if union == 0 else inter / union
    return accuracy, dice, jaccard


@dataclass
class LabelMetrics:
    precision: list[float]
    recall: list[float]
    f1: list[float]

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))

    def lines(self) -> list[str]:
        out = []
        for i, region in enumerate(REGIONS):
            name = region.phrase.replace(" ", "_")
            out.append(
                f"region_{name} = P {self.precision[i]:.4f}, "
                f"R {self.recall[i]:.4f}, F1 {self.f1[i]:.4f}"
            )
        out.append(f"macro_f1 = {self.macro_f1:.6f}")
        return out


def label_metrics(pred_labels, gt_labels) -> LabelMetrics:
    """Per-region precision/recall/F1 plus macro-F1 over the six regions."""
    if len(pred_labels) != len(gt_labels):
        raise ValueError(
            f"length mismatch: {len(pred_labels)} predictions vs {len(gt_labels)} labels"
        )
    pred = np.asarray(pred_labels, dtype=int)
    gt = np.asarray(gt_labels, dtype=int)
    precision, recall, f1 = [], [], []
    for i in range(N_REGIONS):
        tp = int(np.sum((pred[:, i] == 1) & (gt[:, i] == 1)))
        fp = int(np.sum((pred[:, i] == 1) & (gt[:, i] == 0)))
        fn = int(np.sum((pred[:, i] == 0) & (gt[:, i] == 1)))
        precision.append(1.0 if tp + fp == 0 else tp / (tp + fp))
        recall.append(1.0 if tp + fn == 0 else tp / (tp + fn))
        f1.append(1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return LabelMetrics(precision=precision, recall=recall, f1=f1)


@dataclass
class MetricsReport:
    """Aggregated evaluation results for one mode over one manifest."""

    mode: str
    n_samples: int
    mean_accuracy: float
    mean_dice: float
    mean_jaccard: float
    per_sample: list[dict] = field(default_factory=list)
    detector_metrics: LabelMetrics | None = None
    report_exact_match: float | None = None
    metadata: dict = field(default_factory=dict)

    def key_value_lines(self) -> list[str]:
        out = [
            f"mode = {self.mode}",
            f"n_samples = {self.n_samples}",
            f"mean_accuracy = {self.mean_accuracy:.6f}",
            f"mean_dice = {self.mean_dice:.6f}",
            f"mean_jaccard = {self.mean_jaccard:.6f}",
        ]
        if self.detector_metrics is not None:
            out += [f"detector_{ln}" for ln in self.detector_metrics.lines()]
        if self.report_exact_match is not None:
            out.append(f"report_exact_match = {self.report_exact_match:.6f}")
        for k, v in self.metadata.items():
            out.append(f"{k} = {v}")
        return out

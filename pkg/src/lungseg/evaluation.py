"""Evaluation over manifests: per-mode metrics, the three-mode ablation, and
attention/word-importance figure exports.

Modes:
  full-text    segment with the ground-truth report from the manifest
  self-guided  segment with a report generated by the detector
  text-free    segment with the empty report (pair with a checkpoint that
               was also trained with empty reports for a fair ablation)

All modes run over the identical sample order with a fixed binarization
threshold of 0.5. Evaluation writes a flat key = value metrics file, a
per-sample CSV table, and a mean-dice comparison figure.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import plots
from .datagen import DataError, Sample, ingest_manifest, load_samples, save_gray_png
from .detector import ZoneDetector
from .metrics import MetricsReport, label_metrics, seg_metrics
from .reports import parse_report
from .segmenter import TextGuidedSegmenter
from .training import _image_batch, _text_batch, model_from_checkpoint

MODES = ("text-free", "self-guided", "full-text")
BINARIZE_THRESHOLD = 0.5


def load_eval_samples(manifest_path: Path) -> list[Sample]:
    result = ingest_manifest(Path(manifest_path), "test")
    if result.errors:
        msgs = "; ".join(f"record {e.index}: {e.message}" for e in result.errors)
        raise DataError(f"invalid records in {manifest_path}: {msgs}")
    return load_samples(result.manifest, Path(manifest_path).parent)


def generated_reports(
    detector: ZoneDetector, samples: list[Sample], tau: float, batch_size: int = 64
) -> list[str]:
    from .reports import synthesize_report

    out = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            probs = detector.probabilities(_image_batch(chunk)).numpy()
            for row in probs:
                out.append(synthesize_report(tuple(int(v >= tau) for v in row)))
    return out


def evaluate_mode(
    segmenter: TextGuidedSegmenter,
    samples: list[Sample],
    mode: str,
    detector: ZoneDetector | None = None,
    tau: float = 0.5,
    batch_size: int = 64,
    metadata: dict | None = None,
) -> MetricsReport:
    """Segment every sample under one text mode and aggregate metrics."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "full-text":
        reports = [s.report for s in samples]
    elif mode == "text-free":
        reports = [""] * len(samples)
    else:
        if detector is None:
            raise DataError("self-guided evaluation requires a detector checkpoint")
        reports = generated_reports(detector, samples, tau, batch_size)

    rows = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            ids, masks = _text_batch(reports[i : i + len(chunk)], segmenter.cfg.max_tokens)
            logits, _ = segmenter(_image_batch(chunk), ids, masks)
            pred = (torch.sigmoid(logits) >= BINARIZE_THRESHOLD).numpy()
            for j, s in enumerate(chunk):
                acc, dice, jac = seg_metrics(pred[j], s.mask)
                rows.append(
                    {
                        "index": i + j,
                        "accuracy": acc,
                        "dice": dice,
                        "jaccard": jac,
                        "report_used": reports[i + j],
                    }
                )

    report = MetricsReport(
        mode=mode,
        n_samples=len(samples),
        mean_accuracy=float(np.mean([r["accuracy"] for r in rows])),
        mean_dice=float(np.mean([r["dice"] for r in rows])),
        mean_jaccard=float(np.mean([r["jaccard"] for r in rows])),
        per_sample=rows,
        metadata=metadata or {},
    )
    if mode == "self-guided":
        gt_labels = [parse_report(s.report) for s in samples]
        pred_labels = [parse_report(r) for r in reports]
        report.detector_metrics = label_metrics(pred_labels, gt_labels)
        report.report_exact_match = float(
            np.mean([r == s.report for r, s in zip(reports, samples)])
        )
    return report


def evaluate_ablation(
    manifest_path: Path,
    seg_ckpt: Path,
    det_ckpt: Path | None = None,
    modes: tuple[str, ...] = MODES,
    text_free_ckpt: Path | None = None,
    tau: float = 0.5,
    out_dir: Path | None = None,
    provenance: str | None = None,
) -> dict[str, MetricsReport]:
    """Run the requested modes over one manifest with shared sample order."""
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}")
    if "self-guided" in modes and det_ckpt is None:
        raise DataError("self-guided mode requested but no detector checkpoint given")

    samples = load_eval_samples(manifest_path)
    segmenter, seg_data = model_from_checkpoint(seg_ckpt)
    detector = None
    if det_ckpt is not None:
        detector, _ = model_from_checkpoint(det_ckpt)
    text_free_model = segmenter
    text_free_id = str(seg_ckpt)
    if text_free_ckpt is not None:
        text_free_model, _ = model_from_checkpoint(text_free_ckpt)
        text_free_id = str(text_free_ckpt)

    results: dict[str, MetricsReport] = {}
    for mode in modes:
        model = text_free_model if mode == "text-free" else segmenter
        meta = {
            "seg_checkpoint": text_free_id if mode == "text-free" else str(seg_ckpt),
            "binarize_threshold": f"{BINARIZE_THRESHOLD:g}",
            "tau": f"{tau:g}",
            "seed": seg_data.config.get("seed", "?"),
        }
        if mode == "self-guided":
            meta["det_checkpoint"] = str(det_ckpt)
        results[mode] = evaluate_mode(
            model, samples, mode, detector=detector, tau=tau, metadata=meta
        )
    if out_dir is not None:
        write_evaluation_outputs(Path(out_dir), results, provenance)
    return results


def write_evaluation_outputs(
    out_dir: Path, results: dict[str, MetricsReport], provenance: str | None = None
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for mode, rep in results.items():
        lines.append(f"[{mode}]")
        lines.extend(rep.key_value_lines())
        lines.append("")
    text = "\n".join(lines)
    if provenance:
        text += f"# provenance: {provenance}\n"
    (out_dir / "metrics.txt").write_text(text, encoding="utf-8")

    csv_lines = ["mode,index,accuracy,dice,jaccard,report_used"]
    for mode, rep in results.items():
        for row in rep.per_sample:
            quoted = row["report_used"].replace('"', '""')
            csv_lines.append(
                f'{mode},{row["index"]},{row["accuracy"]:.6f},'
                f'{row["dice"]:.6f},{row["jaccard"]:.6f},"{quoted}"'
            )
    csv_text = "\n".join(csv_lines) + "\n"
    if provenance:
        csv_text += f"# provenance: {provenance}\n"
    (out_dir / "per_sample.csv").write_text(csv_text, encoding="utf-8")

    plots.save_mode_comparison(
        {mode: rep.mean_dice for mode, rep in results.items()},
        out_dir / "dice_by_mode.png",
        provenance,
    )


def normalized_attention(segmenter: TextGuidedSegmenter, image: np.ndarray, report: str):
    """Finest-stage attention field min-max normalized to [0, 1].

    A constant field normalizes to all zeros.
    """
    raw = segmenter.attention_map(image, report)
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo <= 0:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def export_attention_maps(
    seg_ckpt: Path,
    image: np.ndarray,
    report: str,
    out_dir: Path,
    gt_mask: np.ndarray | None = None,
    provenance: str | None = None,
) -> list[Path]:
    """Write attention panels and the word-importance heat strip for one image."""
    segmenter, _ = model_from_checkpoint(seg_ckpt)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc

    attention = normalized_attention(segmenter, image, report)
    gray = np.stack([image] * 3, axis=-1)
    heat = np.stack([attention, np.zeros_like(attention), 1.0 - attention], axis=-1)
    overlay = np.clip(0.5 * gray + 0.5 * heat, 0.0, 1.0)

    written = []
    save_gray_png(out_dir / "input.png", image, provenance)
    written.append(out_dir / "input.png")
    if gt_mask is not None:
        save_gray_png(out_dir / "gt_mask.png", gt_mask.astype(np.float64), provenance)
        written.append(out_dir / "gt_mask.png")
    save_gray_png(out_dir / "attention.png", attention, provenance)
    written.append(out_dir / "attention.png")

    from PIL import Image as PILImage
    from PIL.PngImagePlugin import PngInfo

    info = PngInfo()
    if provenance:
        info.add_text("provenance", provenance)
    PILImage.fromarray((overlay * 255).round().astype(np.uint8)).save(
        out_dir / "overlay.png", pnginfo=info
    )
    written.append(out_dir / "overlay.png")

    written.append(
        plots.save_attention_panels(
            image, attention, overlay, out_dir / "panels.png", gt_mask, provenance
        )
    )
    tokens, scores = segmenter.word_importance(image, report)
    written.append(
        plots.save_heat_strip(tokens, scores, out_dir / "word_importance.png", provenance)
    )
    return written

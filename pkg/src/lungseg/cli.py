"""Command-line workbench.

Subcommands cover the full lifecycle: gen-data, pseudo-label, train-seg,
train-det, infer, eval, ablate, attn-viz. Inference is text-free by
default: ``infer`` generates the guiding report with the detector unless an
explicit ``--report`` is given. All randomness flows from ``--seed``, and
every run stamps its outputs with a provenance line (version, config hash,
seed).

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoints import CheckpointError
from .configio import provenance_line, read_config
from .datagen import (
    DataError,
    GeneratorConfig,
    generate_dataset,
    ingest_manifest,
    load_gray_png,
    read_manifest,
    save_gray_png,
    split_dataset_by_counts,
    write_manifest,
)
from .evaluation import MODES, evaluate_ablation, export_attention_maps
from .layers import NumericError
from .metrics import seg_metrics
from .reports import pseudo_label_corpus
from .training import (
    TrainConfig,
    model_from_checkpoint,
    train_detector,
    train_segmenter,
    write_history,
    write_label_entries,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--config", type=Path, default=None, help="flat key = value config file")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-floor", type=float, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument(
        "--augment", choices=("on", "off"), default=None, help="toggle all augmentations"
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="lungseg", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with splits")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--counts", default="512,128,128", help="train,val,test sample counts")
    p.add_argument("--image-size", type=int, default=64)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pseudo-label", help="extract zone labels from a manifest's reports")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="label file to write")
    p.add_argument("--min-cluster-size", type=int, default=5)
    p.add_argument("--min-samples", type=int, default=2)
    _add_common(p)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("train-seg", help="train the text-guided segmenter")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--val", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--text-mode", choices=("ground-truth", "empty", "synthesized"), default=None)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-det", help="train the zone detector on pseudo-labels")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--val", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_det)

    p = sub.add_parser("infer", help="segment one image (text-free by default)")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--seg-ckpt", type=Path, required=True)
    p.add_argument("--det-ckpt", type=Path, default=None)
    p.add_argument("--report", default=None, help="full-text escape hatch")
    p.add_argument("--mask", type=Path, default=None, help="ground-truth mask for metrics")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate one mode over a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--seg-ckpt", type=Path, required=True)
    p.add_argument("--det-ckpt", type=Path, default=None)
    p.add_argument("--mode", choices=MODES, default="self-guided")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the text-free / self-guided / full-text ablation")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--seg-ckpt", type=Path, required=True)
    p.add_argument("--seg-ckpt-notext", type=Path, default=None)
    p.add_argument("--det-ckpt", type=Path, default=None)
    p.add_argument("--modes", default="text-free,self-guided,full-text")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attn-viz", help="export attention panels and word importance")
    p.add_argument("--seg-ckpt", type=Path, required=True)
    p.add_argument("--image", type=Path, default=None)
    p.add_argument("--mask", type=Path, default=None)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--det-ckpt", type=Path, default=None)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_attn_viz)

    return parser


def _file_config(args) -> dict[str, str]:
    if args.config is None:
        return {}
    if not Path(args.config).is_file():
        raise DataError(f"config file not found: {args.config}")
    return read_config(args.config)


def _pick(flag_value, file_cfg: dict, key: str, default, cast):
    if flag_value is not None:
        return flag_value
    if key in file_cfg:
        raw = file_cfg[key]
        return raw.lower() == "true" if cast is bool else cast(raw)
    return default


def _train_config(args, file_cfg: dict) -> TrainConfig:
    aug_default = True
    if args.augment is not None:
        aug_default = args.augment == "on"
        aug_flag = aug_default
    else:
        aug_flag = None
    cfg = TrainConfig(
        epochs=_pick(args.epochs, file_cfg, "epochs", 40, int),
        batch_size=_pick(args.batch_size, file_cfg, "batch_size", 16, int),
        lr=_pick(args.lr, file_cfg, "lr", 3e-4, float),
        lr_floor=_pick(args.lr_floor, file_cfg, "lr_floor", 1e-6, float),
        seed=args.seed,
        dice_weight=_pick(None, file_cfg, "dice_weight", 1.0, float),
        bce_weight=_pick(None, file_cfg, "bce_weight", 1.0, float),
        augment_crop=_pick(aug_flag, file_cfg, "augment_crop", True, bool),
        augment_erase=_pick(aug_flag, file_cfg, "augment_erase", True, bool),
        augment_rotate=_pick(aug_flag, file_cfg, "augment_rotate", True, bool),
        text_mode=_pick(getattr(args, "text_mode", None), file_cfg, "text_mode", "ground-truth", str),
        threads=_pick(args.threads, file_cfg, "threads", 1, int),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _check_tau(tau: float) -> None:
    if not 0.0 < tau < 1.0:
        raise UsageError(f"--tau must be in (0, 1), got {tau}")


def cmd_gen_data(args) -> int:
    try:
        counts = tuple(int(c) for c in args.counts.split(","))
    except ValueError as exc:
        raise UsageError(f"--counts must be three integers, got {args.counts!r}") from exc
    if len(counts) != 3 or min(counts) < 0 or sum(counts) < 1:
        raise UsageError(f"--counts must be three nonnegative integers summing to >= 1")
    file_cfg = _file_config(args)
    cfg = GeneratorConfig(
        num_samples=sum(counts),
        image_size=args.image_size,
        seed=args.seed,
        count_weights=tuple(
            float(w) for w in file_cfg.get("count_weights", "0.15,0.45,0.30,0.10,0,0,0").split(",")
        ),
        delta_range=_parse_pair(file_cfg.get("delta_range"), GeneratorConfig.delta_range),
        radius_frac_range=_parse_pair(
            file_cfg.get("radius_frac_range"), GeneratorConfig.radius_frac_range
        ),
        noise_sigma=float(file_cfg.get("noise_sigma", GeneratorConfig.noise_sigma)),
        blur_sigma=float(file_cfg.get("blur_sigma", GeneratorConfig.blur_sigma)),
        field_intensity=float(file_cfg.get("field_intensity", GeneratorConfig.field_intensity)),
        base_intensity=float(file_cfg.get("base_intensity", GeneratorConfig.base_intensity)),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    prov = provenance_line(cfg.to_dict(), args.seed)
    manifest = generate_dataset(cfg, args.out, prov)
    written = ["all.csv"]
    if min(counts) > 0:
        train, val, test = split_dataset_by_counts(manifest, counts, args.seed)
        for name, m in (("train", train), ("val", val), ("test", test)):
            write_manifest(m, args.out / f"{name}.csv", prov)
            written.append(f"{name}.csv")
    from .configio import write_config

    write_config(args.out / "gen_config.txt", cfg.to_dict(), prov)
    print(f"generated {len(manifest.records)} samples under {args.out} ({', '.join(written)})")
    return 0


def _parse_pair(raw: str | None, default: tuple) -> tuple:
    if raw is None:
        return default
    parts = [float(v) for v in raw.split(",")]
    if len(parts) != 2:
        raise UsageError(f"expected 'lo,hi' pair, got {raw!r}")
    return tuple(parts)


def cmd_pseudo_label(args) -> int:
    result = ingest_manifest(args.manifest)
    if result.errors:
        for e in result.errors:
            print(f"record {e.index} ({e.image_path}): {e.message}", file=sys.stderr)
        raise DataError(f"{len(result.errors)} invalid record(s) in {args.manifest}")
    reports = [rec.report for rec in result.manifest.records]
    labels, audit = pseudo_label_corpus(
        reports, min_cluster_size=args.min_cluster_size, min_samples=args.min_samples
    )
    prov = provenance_line(
        {"manifest": str(args.manifest), "min_cluster_size": args.min_cluster_size,
         "min_samples": args.min_samples}, args.seed,
    )
    entries = [
        (str(rec.image_path), label)
        for rec, label in zip(result.manifest.records, labels)
    ]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_label_entries(args.out, entries, prov)
    audit_path = args.out.with_suffix(".audit.txt")
    audit_path.write_text(
        "\n".join(audit.lines()) + f"\n# provenance: {prov}\n", encoding="utf-8"
    )
    for line in audit.lines():
        print(line)
    print(f"wrote {len(entries)} labels to {args.out}")
    return 0


def cmd_train_seg(args) -> int:
    file_cfg = _file_config(args)
    cfg = _train_config(args, file_cfg)
    from .segmenter import SegmenterConfig

    model_cfg = None
    if any(k in file_cfg for k in ("widths", "text_dim", "heads", "max_tokens", "image_size")):
        base = SegmenterConfig()
        model_cfg = SegmenterConfig(
            image_size=int(file_cfg.get("image_size", base.image_size)),
            widths=tuple(int(w) for w in file_cfg.get("widths", "16,32,64,128").split(",")),
            text_dim=int(file_cfg.get("text_dim", base.text_dim)),
            heads=int(file_cfg.get("heads", base.heads)),
            max_tokens=int(file_cfg.get("max_tokens", base.max_tokens)),
        )
    args.out.mkdir(parents=True, exist_ok=True)
    result = train_segmenter(args.train, args.val, cfg, model_cfg, args.out)
    prov = provenance_line(cfg.to_dict(), cfg.seed)
    write_history(args.out / "history.csv", result.history, prov)
    from .plots import save_history_curves

    save_history_curves(result.history, args.out / "curves.png", prov)
    print(
        f"best val dice {result.best_metric:.4f} at epoch {result.best_epoch}; "
        f"checkpoint {result.checkpoint_path}"
    )
    return 0


def cmd_train_det(args) -> int:
    file_cfg = _file_config(args)
    cfg = _train_config(args, file_cfg)
    from .detector import DetectorConfig

    model_cfg = None
    if any(k in file_cfg for k in ("widths", "d_model", "n_queries", "decoder_layers", "image_size")):
        base = DetectorConfig()
        model_cfg = DetectorConfig(
            image_size=int(file_cfg.get("image_size", base.image_size)),
            widths=tuple(int(w) for w in file_cfg.get("widths", "16,32,64").split(",")),
            d_model=int(file_cfg.get("d_model", base.d_model)),
            n_queries=int(file_cfg.get("n_queries", base.n_queries)),
            heads=int(file_cfg.get("heads", base.heads)),
            decoder_layers=int(file_cfg.get("decoder_layers", base.decoder_layers)),
        )
    args.out.mkdir(parents=True, exist_ok=True)
    result = train_detector(args.train, args.labels, args.val, cfg, model_cfg, args.out)
    prov = provenance_line(cfg.to_dict(), cfg.seed)
    write_history(args.out / "history.csv", result.history, prov)
    from .plots import save_history_curves

    save_history_curves(result.history, args.out / "curves.png", prov)
    print(
        f"best val macro-F1 {result.best_metric:.4f} at epoch {result.best_epoch}; "
        f"checkpoint {result.checkpoint_path}"
    )
    return 0


def self_guided_segment(
    image: np.ndarray, seg_ckpt: Path, det_ckpt: Path, tau: float = 0.5
) -> tuple[np.ndarray, str, np.ndarray]:
    """Generate a report from the image, then segment under its guidance.

    Returns (binary mask, generated report, segmentation probabilities).
    """
    detector, _ = model_from_checkpoint(det_ckpt)
    segmenter, _ = model_from_checkpoint(seg_ckpt)
    report = detector.generate_report(image, tau)
    probs = segmenter.segment_probabilities(image, report)
    return (probs >= 0.5).astype(np.uint8), report, probs


def cmd_infer(args) -> int:
    _check_tau(args.tau)
    if args.report is None and args.det_ckpt is None:
        raise UsageError(
            "infer is text-free by default and needs --det-ckpt to generate the "
            "report; pass --report TEXT to supply one explicitly"
        )
    if not args.image.is_file():
        raise DataError(f"image file not found: {args.image}")
    image = load_gray_png(args.image).astype(np.float64) / 255.0
    if image.shape[0] != image.shape[1] or image.shape[0] % 32:
        raise DataError(
            f"image must be square with side divisible by 32, got {image.shape}"
        )
    if args.report is not None:
        segmenter, _ = model_from_checkpoint(args.seg_ckpt)
        report = args.report
        probs = segmenter.segment_probabilities(image, report)
        mask = (probs >= 0.5).astype(np.uint8)
    else:
        mask, report, probs = self_guided_segment(image, args.seg_ckpt, args.det_ckpt, args.tau)

    args.out.mkdir(parents=True, exist_ok=True)
    prov = provenance_line(
        {"image": str(args.image), "seg_ckpt": str(args.seg_ckpt),
         "det_ckpt": str(args.det_ckpt), "tau": args.tau, "report": args.report or ""},
        args.seed,
    )
    save_gray_png(args.out / "mask.png", mask * 255, prov)
    (args.out / "report.txt").write_text(f"{report}\n# provenance: {prov}\n", encoding="utf-8")
    print(f"report: {report}")
    if args.mask is not None:
        if not args.mask.is_file():
            raise DataError(f"ground-truth mask not found: {args.mask}")
        gt = (load_gray_png(args.mask) >= 128).astype(np.uint8)
        acc, dice, jac = seg_metrics(mask, gt)
        lines = [
            f"accuracy = {acc:.6f}",
            f"dice = {dice:.6f}",
            f"jaccard = {jac:.6f}",
        ]
        (args.out / "metrics.txt").write_text(
            "\n".join(lines) + f"\n# provenance: {prov}\n", encoding="utf-8"
        )
        print("; ".join(lines))
    return 0


def cmd_eval(args) -> int:
    _check_tau(args.tau)
    if args.mode == "self-guided" and args.det_ckpt is None:
        raise UsageError("--mode self-guided requires --det-ckpt")
    prov = provenance_line(
        {"manifest": str(args.manifest), "seg_ckpt": str(args.seg_ckpt),
         "det_ckpt": str(args.det_ckpt), "mode": args.mode, "tau": args.tau},
        args.seed,
    )
    results = evaluate_ablation(
        args.manifest,
        args.seg_ckpt,
        det_ckpt=args.det_ckpt,
        modes=(args.mode,),
        tau=args.tau,
        out_dir=args.out,
        provenance=prov,
    )
    rep = results[args.mode]
    print(
        f"{args.mode}: n={rep.n_samples} accuracy={rep.mean_accuracy:.4f} "
        f"dice={rep.mean_dice:.4f} jaccard={rep.mean_jaccard:.4f}"
    )
    return 0


def cmd_ablate(args) -> int:
    _check_tau(args.tau)
    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}; choose from {', '.join(MODES)}")
    if "self-guided" in modes and args.det_ckpt is None:
        raise UsageError("--det-ckpt is required when the self-guided mode is requested")
    if "text-free" in modes and args.seg_ckpt_notext is None:
        print(
            "note: no --seg-ckpt-notext given; text-free mode will reuse --seg-ckpt "
            "(train a segmenter with --text-mode empty for a fair ablation)",
            file=sys.stderr,
        )
    prov = provenance_line(
        {"manifest": str(args.manifest), "seg_ckpt": str(args.seg_ckpt),
         "seg_ckpt_notext": str(args.seg_ckpt_notext), "det_ckpt": str(args.det_ckpt),
         "modes": ",".join(modes), "tau": args.tau},
        args.seed,
    )
    results = evaluate_ablation(
        args.manifest,
        args.seg_ckpt,
        det_ckpt=args.det_ckpt,
        modes=modes,
        text_free_ckpt=args.seg_ckpt_notext,
        tau=args.tau,
        out_dir=args.out,
        provenance=prov,
    )
    for mode, rep in results.items():
        print(f"{mode}: dice={rep.mean_dice:.4f} jaccard={rep.mean_jaccard:.4f}")
    return 0


def cmd_attn_viz(args) -> int:
    _check_tau(args.tau)
    gt_mask = None
    if args.manifest is not None:
        manifest = read_manifest(args.manifest)
        if not 0 <= args.index < len(manifest.records):
            raise UsageError(
                f"--index {args.index} out of range for {len(manifest.records)} records"
            )
        from .datagen import load_sample

        sample = load_sample(manifest.records[args.index], args.manifest.parent)
        image, gt_mask, report = sample.image, sample.mask, sample.report
    elif args.image is not None:
        if not args.image.is_file():
            raise DataError(f"image file not found: {args.image}")
        image = load_gray_png(args.image).astype(np.float64) / 255.0
        if args.mask is not None:
            gt_mask = (load_gray_png(args.mask) >= 128).astype(np.uint8)
        if args.det_ckpt is not None:
            detector, _ = model_from_checkpoint(args.det_ckpt)
            report = detector.generate_report(image, args.tau)
        else:
            report = ""
    else:
        raise UsageError("attn-viz needs either --manifest/--index or --image")

    prov = provenance_line(
        {"seg_ckpt": str(args.seg_ckpt), "image": str(args.image),
         "manifest": str(args.manifest), "index": args.index}, args.seed,
    )
    written = export_attention_maps(
        args.seg_ckpt, image, report, args.out, gt_mask=gt_mask, provenance=prov
    )
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()

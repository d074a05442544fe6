"""Training loops for the segmenter and the detector.

Both use AdamW with a cosine-annealed learning rate (3e-4 down to 1e-6 by
the final step), seeded shuffling, optional augmentation, and keep the
checkpoint of the best validation epoch. With a fixed seed and the
single-threaded numeric mode (threads = 1, the default) two runs produce
bit-identical histories on the same platform.

The segmenter minimizes soft-dice plus pixelwise binary cross-entropy
against the mask, with the report text chosen by ``text_mode``
(ground-truth, empty, or synthesized from the mask). The detector minimizes
the six-label BCE against pseudo-labels read from a label file; geometric
augmentations are not applied to detector training because they would
desynchronize the report-derived supervision, so only the erase
augmentation is used there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .checkpoints import CheckpointData, load_checkpoint, load_params_into, save_checkpoint
from .datagen import DataError, Sample, ingest_manifest, load_samples
from .detector import DetectorConfig, ZoneDetector, bce_loss
from .layers import NumericError
from .metrics import label_metrics, seg_metrics
from .regions import label_from_mask
from .reports import parse_report, synthesize_report
from .segmenter import SegmenterConfig, TextGuidedSegmenter, encode_tokens

TEXT_MODES = ("ground-truth", "empty", "synthesized")


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 3e-4
    lr_floor: float = 1e-6
    seed: int = 0
    dice_weight: float = 1.0
    bce_weight: float = 1.0
    augment_crop: bool = True
    augment_erase: bool = True
    augment_rotate: bool = True
    text_mode: str = "ground-truth"
    threads: int = 1

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.threads < 1:
            raise ValueError("epochs, batch_size, and threads must be positive")
        if self.lr <= 0 or self.lr_floor <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_floor >= self.lr:
            raise ValueError("lr_floor must be below the initial lr")
        if self.dice_weight < 0 or self.bce_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.text_mode not in TEXT_MODES:
            raise ValueError(f"text_mode must be one of {TEXT_MODES}")

    def to_dict(self) -> dict:
        return {
            "epochs": str(self.epochs),
            "batch_size": str(self.batch_size),
            "lr": f"{self.lr:g}",
            "lr_floor": f"{self.lr_floor:g}",
            "seed": str(self.seed),
            "dice_weight": f"{self.dice_weight:g}",
            "bce_weight": f"{self.bce_weight:g}",
            "augment_crop": str(self.augment_crop).lower(),
            "augment_erase": str(self.augment_erase).lower(),
            "augment_rotate": str(self.augment_rotate).lower(),
            "text_mode": self.text_mode,
            "threads": str(self.threads),
        }


def cosine_lr(step: int, total_steps: int, lr0: float, floor: float) -> float:
    """Cosine schedule: lr0 at step 0, floor at the final step."""
    if total_steps <= 1:
        return lr0
    t = min(max(step, 0), total_steps - 1)
    return floor + 0.5 * (lr0 - floor) * (1.0 + math.cos(math.pi * t / (total_steps - 1)))


def _shift2d(arr: np.ndarray, dr: int, dc: int, mode: str) -> np.ndarray:
    pr, pc = abs(dr), abs(dc)
    if pr == 0 and pc == 0:
        return arr.copy()
    padded = np.pad(arr, ((pr, pr), (pc, pc)), mode=mode)
    h, w = arr.shape
    return padded[pr - dr : pr - dr + h, pc - dc : pc - dc + w].copy()


def augment(
    sample: Sample,
    seed: int,
    crop: bool = True,
    erase: bool = True,
    rotate: bool = True,
) -> Sample:
    """Deterministic augmentation; label and report are re-derived from the
    transformed mask so text, label, and mask stay consistent.

    rotate: +-15 degrees, nearest-neighbor, image and mask together.
    crop: pad-and-crop shift of at most 8% of the side, image and mask.
    erase: one zeroed rectangle of at most 10% area, image only.
    """
    if not (crop or erase or rotate):
        return sample
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    image = sample.image.copy()
    mask = sample.mask.copy()
    h, w = image.shape
    if rotate:
        angle = float(rng.uniform(-15.0, 15.0))
        image = ndimage.rotate(image, angle, reshape=False, order=0, mode="nearest")
        mask = ndimage.rotate(mask, angle, reshape=False, order=0, mode="constant", cval=0)
    if crop:
        m = max(1, round(0.08 * h))
        dr, dc = (int(v) for v in rng.integers(-m, m + 1, size=2))
        image = _shift2d(image, dr, dc, "edge")
        mask = _shift2d(mask, dr, dc, "constant")
    if erase:
        max_area = 0.10 * h * w
        eh = int(rng.integers(2, max(3, int(0.32 * h)) + 1))
        ew = int(rng.integers(1, max(1, min(w, int(max_area / eh))) + 1))
        r0 = int(rng.integers(0, h - eh + 1))
        c0 = int(rng.integers(0, w - ew + 1))
        image[r0 : r0 + eh, c0 : c0 + ew] = 0.0
    label = label_from_mask(mask)
    return Sample(
        image=image,
        mask=mask.astype(np.uint8),
        report=synthesize_report(label),
        label=label,
    )


def _augment_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 11, epoch, index]).generate_state(1)[0])


def report_for(sample: Sample, text_mode: str) -> str:
    if text_mode == "ground-truth":
        return sample.report
    if text_mode == "empty":
        return ""
    return synthesize_report(sample.label)


def _text_batch(reports: list[str], max_tokens: int):
    ids, masks = [], []
    for r in reports:
        i, m, _ = encode_tokens(r, max_tokens)
        ids.append(i)
        masks.append(m)
    return torch.stack(ids), torch.stack(masks)


def _image_batch(samples: list[Sample]) -> torch.Tensor:
    arr = np.stack([s.image for s in samples]).astype(np.float32)
    return torch.from_numpy(arr).unsqueeze(1)


def _mask_batch(samples: list[Sample]) -> torch.Tensor:
    arr = np.stack([s.mask for s in samples]).astype(np.float32)
    return torch.from_numpy(arr)


def dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    p = torch.sigmoid(logits)
    inter = (p * target).sum(dim=(-2, -1))
    denom = p.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def segmentation_loss(logits, target, dice_weight: float, bce_weight: float) -> torch.Tensor:
    bce = torch.nn.functional.binary_cross_entropy_with_logits(logits, target)
    return dice_weight * dice_loss(logits, target) + bce_weight * bce


@dataclass
class TrainResult:
    checkpoint_path: Path
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("-inf")
    initial_train_loss: float = float("nan")


def _load_split(path: Path, split: str) -> list[Sample]:
    result = ingest_manifest(Path(path), split)
    if result.errors:
        msgs = "; ".join(f"record {e.index} ({e.image_path}): {e.message}" for e in result.errors)
        raise DataError(f"invalid records in {path}: {msgs}")
    if not result.manifest.records:
        raise DataError(f"manifest {path} has no records")
    samples = load_samples(result.manifest, Path(path).parent)
    sizes = {s.image.shape for s in samples}
    if len(sizes) != 1:
        raise DataError(f"mixed image sizes in {path}: {sorted(sizes)}")
    return samples


def _check_loss_finite(loss: torch.Tensor, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite training loss at epoch {epoch}, step {step}: {loss.item()!r}"
        )


def _snapshot(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def _restore(model: torch.nn.Module, snap: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for k, v in model.named_parameters():
            v.copy_(snap[k])


def write_history(path: Path, history: list[dict], provenance: str | None = None) -> None:
    if not history:
        return
    cols = list(history[0].keys())
    lines = [",".join(cols)]
    for row in history:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    text = "\n".join(lines) + "\n"
    if provenance:
        text += f"# provenance: {provenance}\n"
    Path(path).write_text(text, encoding="utf-8")


def _fmt(v) -> str:
    return f"{v:.8f}" if isinstance(v, float) else str(v)


def train_segmenter(
    train_manifest: Path,
    val_manifest: Path,
    config: TrainConfig,
    model_config: SegmenterConfig | None = None,
    out_dir: Path = Path("."),
    checkpoint_name: str = "seg.ckpt",
) -> TrainResult:
    """Train the text-guided segmenter; keeps the best-val-dice checkpoint."""
    config.validate()
    torch.set_num_threads(config.threads)
    train = _load_split(train_manifest, "train")
    val = _load_split(val_manifest, "val")
    side = train[0].image.shape[0]
    model_config = model_config or SegmenterConfig(image_size=side)
    if model_config.image_size != side:
        raise DataError(
            f"model image_size {model_config.image_size} does not match data {side}"
        )

    torch.manual_seed(config.seed)
    model = TextGuidedSegmenter(model_config, seed=config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr)
    n = len(train)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    def eval_loss(samples: list[Sample]) -> float:
        model.eval()
        losses = []
        with torch.no_grad():
            for i in range(0, len(samples), config.batch_size):
                chunk = samples[i : i + config.batch_size]
                ids, masks = _text_batch(
                    [report_for(s, config.text_mode) for s in chunk],
                    model_config.max_tokens,
                )
                logits, _ = model(_image_batch(chunk), ids, masks)
                losses.append(
                    float(
                        segmentation_loss(
                            logits, _mask_batch(chunk), config.dice_weight, config.bce_weight
                        )
                    )
                )
        model.train()
        return float(np.mean(losses))

    def eval_dice(samples: list[Sample]) -> float:
        model.eval()
        dices = []
        with torch.no_grad():
            for i in range(0, len(samples), config.batch_size):
                chunk = samples[i : i + config.batch_size]
                ids, masks = _text_batch(
                    [report_for(s, config.text_mode) for s in chunk],
                    model_config.max_tokens,
                )
                logits, _ = model(_image_batch(chunk), ids, masks)
                pred = (torch.sigmoid(logits) >= 0.5).numpy()
                for j, s in enumerate(chunk):
                    dices.append(seg_metrics(pred[j], s.mask)[1])
        model.train()
        return float(np.mean(dices))

    result = TrainResult(checkpoint_path=Path(out_dir) / checkpoint_name)
    result.initial_train_loss = eval_loss(train)
    best_params = _snapshot(model)
    step = 0
    for epoch in range(config.epochs):
        perm = np.random.default_rng(
            np.random.SeedSequence([config.seed, 7, epoch])
        ).permutation(n)
        epoch_losses = []
        for b in range(0, n, config.batch_size):
            batch_idx = perm[b : b + config.batch_size]
            chunk = []
            for i in batch_idx:
                s = train[int(i)]
                chunk.append(
                    augment(
                        s,
                        _augment_seed(config.seed, epoch, int(i)),
                        crop=config.augment_crop,
                        erase=config.augment_erase,
                        rotate=config.augment_rotate,
                    )
                )
            ids, tmasks = _text_batch(
                [report_for(s, config.text_mode) for s in chunk], model_config.max_tokens
            )
            for g in opt.param_groups:
                g["lr"] = cosine_lr(step, total_steps, config.lr, config.lr_floor)
            logits, _ = model(_image_batch(chunk), ids, tmasks)
            loss = segmentation_loss(
                logits, _mask_batch(chunk), config.dice_weight, config.bce_weight
            )
            _check_loss_finite(loss, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss))
            step += 1
        val_dice = eval_dice(val)
        result.history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_dice": val_dice,
                "lr": cosine_lr(step - 1, total_steps, config.lr, config.lr_floor),
            }
        )
        if val_dice > result.best_metric:
            result.best_metric = val_dice
            result.best_epoch = epoch
            best_params = _snapshot(model)

    _restore(model, best_params)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "best_epoch": str(result.best_epoch),
        "best_val_dice": f"{result.best_metric:.6f}",
        "initial_train_loss": f"{result.initial_train_loss:.6f}",
        "seed": str(config.seed),
        "rng_state": torch.get_rng_state().numpy().tobytes().hex(),
    }
    save_checkpoint(
        result.checkpoint_path,
        "segmenter",
        {**model_config.to_dict(), **config.to_dict()},
        meta,
        dict(model.named_parameters()),
    )
    return result


def read_label_entries(path: Path) -> dict[str, tuple]:
    """Label file: one ``image_path,b0b1b2b3b4b5`` line per record."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"label file not found: {path}")
    entries: dict[str, tuple] = {}
    for ln in path.read_text(encoding="utf-8").splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        key, _, bits = ln.rpartition(",")
        if not key or len(bits) != 6 or any(b not in "01" for b in bits):
            raise DataError(f"{path}: malformed label line {ln!r}")
        entries[key] = tuple(int(b) for b in bits)
    return entries


def write_label_entries(
    path: Path, entries: list[tuple[str, tuple]], provenance: str | None = None
) -> None:
    lines = [f"{key},{''.join(str(b) for b in label)}" for key, label in entries]
    text = "\n".join(lines) + "\n"
    if provenance:
        text += f"# provenance: {provenance}\n"
    Path(path).write_text(text, encoding="utf-8")


def train_detector(
    train_manifest: Path,
    labels_path: Path,
    val_manifest: Path,
    config: TrainConfig,
    model_config: DetectorConfig | None = None,
    out_dir: Path = Path("."),
    checkpoint_name: str = "det.ckpt",
) -> TrainResult:
    """Train the zone detector on pseudo-labels; keeps the best-macro-F1 epoch.

    Only the erase augmentation applies here: geometric transforms would
    invalidate the report-derived labels.
    """
    config.validate()
    torch.set_num_threads(config.threads)
    train = _load_split(train_manifest, "train")
    val = _load_split(val_manifest, "val")
    side = train[0].image.shape[0]
    model_config = model_config or DetectorConfig(image_size=side)
    if model_config.image_size != side:
        raise DataError(
            f"model image_size {model_config.image_size} does not match data {side}"
        )

    from .datagen import read_manifest

    train_records = read_manifest(Path(train_manifest)).records
    entries = read_label_entries(labels_path)
    keys = [str(r.image_path) for r in train_records]
    missing = [k for k in keys if k not in entries]
    extra = sorted(set(entries) - set(keys))
    if missing or extra:
        raise DataError(
            "label/manifest misalignment: "
            + (f"missing labels for {missing[:5]}" if missing else "")
            + ("; " if missing and extra else "")
            + (f"labels without records {extra[:5]}" if extra else "")
        )
    targets = np.array([entries[k] for k in keys], dtype=np.float32)
    val_labels = [parse_report(s.report) for s in val]

    torch.manual_seed(config.seed)
    model = ZoneDetector(model_config, seed=config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr)
    n = len(train)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    def eval_macro_f1() -> float:
        model.eval()
        preds = []
        with torch.no_grad():
            for i in range(0, len(val), config.batch_size):
                chunk = val[i : i + config.batch_size]
                p = model.probabilities(_image_batch(chunk)).numpy()
                preds.extend(tuple(int(v >= 0.5) for v in row) for row in p)
        model.train()
        return label_metrics(preds, val_labels).macro_f1

    result = TrainResult(checkpoint_path=Path(out_dir) / checkpoint_name)
    best_params = _snapshot(model)
    step = 0
    for epoch in range(config.epochs):
        perm = np.random.default_rng(
            np.random.SeedSequence([config.seed, 7, epoch])
        ).permutation(n)
        epoch_losses = []
        for b in range(0, n, config.batch_size):
            batch_idx = perm[b : b + config.batch_size]
            chunk, ys = [], []
            for i in batch_idx:
                s = train[int(i)]
                if config.augment_erase:
                    s = augment(
                        s,
                        _augment_seed(config.seed, epoch, int(i)),
                        crop=False,
                        rotate=False,
                        erase=True,
                    )
                chunk.append(s)
                ys.append(targets[int(i)])
            for g in opt.param_groups:
                g["lr"] = cosine_lr(step, total_steps, config.lr, config.lr_floor)
            p = model.probabilities(_image_batch(chunk))
            loss = bce_loss(p, torch.from_numpy(np.stack(ys)))
            _check_loss_finite(loss, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss))
            step += 1
        macro = eval_macro_f1()
        result.history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_macro_f1": macro,
                "lr": cosine_lr(step - 1, total_steps, config.lr, config.lr_floor),
            }
        )
        if macro > result.best_metric:
            result.best_metric = macro
            result.best_epoch = epoch
            best_params = _snapshot(model)

    _restore(model, best_params)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "best_epoch": str(result.best_epoch),
        "best_val_macro_f1": f"{result.best_metric:.6f}",
        "seed": str(config.seed),
        "rng_state": torch.get_rng_state().numpy().tobytes().hex(),
    }
    save_checkpoint(
        result.checkpoint_path,
        "detector",
        {**model_config.to_dict(), **config.to_dict()},
        meta,
        dict(model.named_parameters()),
    )
    return result


def model_from_checkpoint(path: Path) -> tuple[torch.nn.Module, CheckpointData]:
    """Rebuild a model from an archive; forward outputs match bit-for-bit."""
    data = load_checkpoint(path)
    if data.kind == "segmenter":
        model = TextGuidedSegmenter(SegmenterConfig.from_dict(data.config))
    elif data.kind == "detector":
        model = ZoneDetector(DetectorConfig.from_dict(data.config))
    else:
        raise DataError(f"{path}: unknown model kind {data.kind!r}")
    load_params_into(model, data, Path(path))
    model.eval()
    return model, data

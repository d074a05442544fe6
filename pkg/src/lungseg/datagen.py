"""Synthetic image/mask/report triplets and dataset manifest I/O.

Images are square grayscale chest-like scenes: two elliptical "lung fields"
over a noisy background, with each lesion rendered as a brighter disk. The
binary mask covers exactly the lesion disks, the 6-bit label is recomputed
from mask occupancy of the six zone rectangles, and the report is
synthesized from the label, so image, mask, label, and report are mutually
consistent by construction.

Lesion contrast is drawn from a range that reaches down to the noise floor:
zone-level presence stays easy to detect (statistics pool over many pixels)
while pixel-accurate segmentation of the faintest lesions genuinely benefits
from knowing which zones to trust.

Manifest format: UTF-8 text, header line ``image,mask,report``,
comma-delimited, the report field double-quoted with doubled-quote escaping.
Lines starting with ``#`` are ignored on read (used for provenance).
Images and masks are 8-bit grayscale PNG; masks hold values {0, 255} and are
binarized at 128 on load.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin
from scipy.ndimage import gaussian_filter

from .regions import REGIONS, LungRegion, label_from_mask, zone_box
from .reports import synthesize_report

MANIFEST_HEADER = ("image", "mask", "report")
MASK_THRESHOLD = 128


class DataError(Exception):
    """Invalid dataset inputs: bad manifests, unreadable records, misalignments."""


@dataclass(frozen=True)
class LesionSpec:
    region: LungRegion
    center: tuple[int, int]  # (row, col)
    radius: int
    delta: float  # added intensity, in [0, 1]


@dataclass
class Sample:
    image: np.ndarray  # float64 in [0, 1], H x W
    mask: np.ndarray  # uint8 in {0, 1}, H x W
    report: str
    label: tuple


@dataclass(frozen=True)
class ManifestRecord:
    image_path: Path
    mask_path: Path
    report: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class GeneratorConfig:
    num_samples: int = 768
    image_size: int = 64
    seed: int = 0
    # weight of lesion counts 0..6 (normalized internally)
    count_weights: tuple = (0.15, 0.45, 0.30, 0.10, 0.0, 0.0, 0.0)
    delta_range: tuple = (0.11, 0.30)
    radius_frac_range: tuple = (0.055, 0.105)
    noise_sigma: float = 0.07
    blur_sigma: float = 0.8
    field_intensity: float = 0.16
    base_intensity: float = 0.18

    def validate(self) -> None:
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if len(self.count_weights) != 7 or min(self.count_weights) < 0:
            raise ValueError("count_weights needs 7 nonnegative entries")
        if sum(self.count_weights) <= 0:
            raise ValueError("count_weights must not all be zero")

    def to_dict(self) -> dict:
        return {
            "num_samples": str(self.num_samples),
            "image_size": str(self.image_size),
            "seed": str(self.seed),
            "count_weights": ",".join(f"{w:g}" for w in self.count_weights),
            "delta_range": f"{self.delta_range[0]:g},{self.delta_range[1]:g}",
            "radius_frac_range": f"{self.radius_frac_range[0]:g},{self.radius_frac_range[1]:g}",
            "noise_sigma": f"{self.noise_sigma:g}",
            "blur_sigma": f"{self.blur_sigma:g}",
            "field_intensity": f"{self.field_intensity:g}",
            "base_intensity": f"{self.base_intensity:g}",
        }


def _lung_field(size: int, side: str) -> np.ndarray:
    """Filled ellipse for one lung field, as a float {0,1} array."""
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = 0.52 * size
    cx = (0.27 if side == "left" else 0.73) * size
    ry, rx = 0.40 * size, 0.18 * size
    return (((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0).astype(np.float64)


def _disk_mask(size: int, center: tuple[int, int], radius: int) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2


def validate_specs(specs: list[LesionSpec], image_size: int) -> None:
    if len(specs) > 6:
        raise ValueError(f"at most 6 lesion specs allowed, got {len(specs)}")
    seen = set()
    half = image_size // 2
    for spec in specs:
        if spec.region.index in seen:
            raise ValueError(f"more than one lesion in region {spec.region.phrase!r}")
        seen.add(spec.region.index)
        if spec.radius <= 0:
            raise ValueError("lesion radius must be positive")
        r0, r1, c0, c1 = zone_box(spec.region, image_size)
        r, c = spec.center
        if not (r0 <= r < r1 and c0 <= c < c1):
            raise ValueError(
                f"lesion center {spec.center} outside its region {spec.region.phrase!r}"
            )
        lo, hi = c - spec.radius, c + spec.radius
        if (spec.region.side == "left" and hi >= half) or (
            spec.region.side == "right" and lo < half
        ):
            raise ValueError(
                f"lesion at {spec.center} r={spec.radius} crosses the mid-sternal line"
            )
        if not (0.0 <= spec.delta <= 1.0):
            raise ValueError("lesion intensity delta must be in [0, 1]")


def render_sample(
    specs: list[LesionSpec],
    image_size: int,
    seed: int,
    config: GeneratorConfig | None = None,
) -> Sample:
    """Deterministically render one sample from lesion specs and a seed."""
    if image_size < 32:
        raise ValueError("image_size must be >= 32")
    validate_specs(specs, image_size)
    cfg = config or GeneratorConfig(image_size=image_size)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    scene = np.full((image_size, image_size), cfg.base_intensity, dtype=np.float64)
    for side in ("left", "right"):
        scene += cfg.field_intensity * _lung_field(image_size, side)

    mask = np.zeros((image_size, image_size), dtype=np.uint8)
    for spec in specs:
        disk = _disk_mask(image_size, spec.center, spec.radius)
        scene[disk] += spec.delta
        mask[disk] = 1

    image = gaussian_filter(scene, sigma=cfg.blur_sigma)
    image += rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)

    label = label_from_mask(mask)
    return Sample(image=image, mask=mask, report=synthesize_report(label), label=label)


def sample_specs(rng: np.random.Generator, cfg: GeneratorConfig) -> list[LesionSpec]:
    """Draw lesion specs with margins so each disk stays inside one zone box."""
    weights = np.asarray(cfg.count_weights, dtype=np.float64)
    count = int(rng.choice(7, p=weights / weights.sum()))
    regions = rng.choice(6, size=count, replace=False)
    size = cfg.image_size
    half = size // 2
    r_lo = max(2, int(round(cfg.radius_frac_range[0] * size)))
    r_hi = max(r_lo, int(round(cfg.radius_frac_range[1] * size)))
    specs = []
    for ri in sorted(int(r) for r in regions):
        region = REGIONS[ri]
        radius = int(rng.integers(r_lo, r_hi + 1))
        r0, r1, c0, c1 = zone_box(region, size)
        # shrink the box so the disk cannot leave the zone or cross the mid line
        rr0, rr1 = r0 + radius + 1, r1 - radius - 1
        cc0 = c0 + radius + 1
        cc1 = c1 - radius - 1
        while rr1 <= rr0 or cc1 <= cc0:  # radius too big for the zone
            radius -= 1
            rr0, rr1 = r0 + radius + 1, r1 - radius - 1
            cc0, cc1 = c0 + radius + 1, c1 - radius - 1
        center = (int(rng.integers(rr0, rr1 + 1)), int(rng.integers(cc0, cc1 + 1)))
        delta = float(rng.uniform(*cfg.delta_range))
        specs.append(LesionSpec(region=region, center=center, radius=radius, delta=delta))
    return specs


def sample_seed(config_seed: int, index: int, stream: int = 0) -> int:
    """Stable per-sample seed, independent of generation order."""
    ss = np.random.SeedSequence([config_seed, index, stream])
    return int(ss.generate_state(1)[0])


def make_sample(cfg: GeneratorConfig, index: int) -> Sample:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index, 1]))
    specs = sample_specs(rng, cfg)
    return render_sample(specs, cfg.image_size, sample_seed(cfg.seed, index), cfg)


def save_gray_png(path: Path, values: np.ndarray, provenance: str | None = None) -> None:
    """Write a float [0,1] or uint8 array as 8-bit grayscale PNG."""
    if values.dtype != np.uint8:
        values = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    info = PngImagePlugin.PngInfo()
    if provenance:
        info.add_text("provenance", provenance)
    Image.fromarray(values, mode="L").save(path, format="PNG", pnginfo=info)


def load_gray_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def generate_dataset(
    cfg: GeneratorConfig, out_dir: Path, provenance: str | None = None
) -> DatasetManifest:
    """Render cfg.num_samples samples to disk and return the manifest.

    Per-sample seeds derive from (cfg.seed, index), so generation is
    order-independent and byte-reproducible.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc

    records = []
    for i in range(cfg.num_samples):
        sample = make_sample(cfg, i)
        image_rel = Path("images") / f"img_{i:05d}.png"
        mask_rel = Path("masks") / f"msk_{i:05d}.png"
        save_gray_png(out_dir / image_rel, sample.image, provenance)
        save_gray_png(out_dir / mask_rel, sample.mask * 255, provenance)
        records.append(
            ManifestRecord(image_path=image_rel, mask_path=mask_rel, report=sample.report)
        )
    manifest = DatasetManifest(records=records, split="train")
    write_manifest(manifest, out_dir / "all.csv", provenance)
    return manifest


def write_manifest(
    manifest: DatasetManifest, path: Path, provenance: str | None = None
) -> None:
    buf = io.StringIO()
    buf.write(",".join(MANIFEST_HEADER) + "\n")
    for rec in manifest.records:
        report = rec.report.replace('"', '""')
        buf.write(f'{rec.image_path},{rec.mask_path},"{report}"\n')
    if provenance:
        buf.write(f"# provenance: {provenance}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_manifest(path: Path, split: str = "train") -> DatasetManifest:
    """Parse a manifest file; no record validation beyond the line format."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest file not found: {path}")
    lines = [
        ln
        for ln in path.read_text(encoding="utf-8").splitlines()
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not lines or tuple(next(csv.reader([lines[0]]))) != MANIFEST_HEADER:
        raise DataError(f"manifest {path} missing header line 'image,mask,report'")
    records = []
    for ln in lines[1:]:
        row = next(csv.reader([ln]))
        if len(row) != 3:
            raise DataError(f"manifest {path}: malformed line {ln!r}")
        records.append(
            ManifestRecord(image_path=Path(row[0]), mask_path=Path(row[1]), report=row[2])
        )
    return DatasetManifest(records=records, split=split)


@dataclass
class RecordError:
    index: int
    image_path: str
    message: str


@dataclass
class IngestResult:
    manifest: DatasetManifest
    errors: list[RecordError] = field(default_factory=list)


def load_sample(record: ManifestRecord, root: Path) -> Sample:
    """Load and validate one record; raises DataError on any defect."""
    image_path = root / record.image_path
    mask_path = root / record.mask_path
    if not image_path.is_file():
        raise DataError(f"missing image file {image_path}")
    if not mask_path.is_file():
        raise DataError(f"missing mask file {mask_path}")
    image = load_gray_png(image_path).astype(np.float64) / 255.0
    mask_raw = load_gray_png(mask_path)
    if image.shape != mask_raw.shape:
        raise DataError(
            f"shape mismatch image {image.shape} vs mask {mask_raw.shape} for {record.image_path}"
        )
    bad = set(np.unique(mask_raw)) - {0, 255}
    if bad:
        raise DataError(f"non-binary mask (values {sorted(bad)}) in {record.mask_path}")
    mask = (mask_raw >= MASK_THRESHOLD).astype(np.uint8)
    return Sample(
        image=image, mask=mask, report=record.report, label=label_from_mask(mask)
    )


def ingest_manifest(path: Path, split: str = "train") -> IngestResult:
    """Read a manifest and validate every record by loading it.

    Reports are kept verbatim; labels are always recomputed downstream.
    Returns the valid records plus a per-record error list.
    """
    path = Path(path)
    manifest = read_manifest(path, split)
    root = path.parent
    good, errors = [], []
    seen = set()
    for i, rec in enumerate(manifest.records):
        key = str(rec.image_path)
        if key in seen:
            errors.append(RecordError(i, key, "duplicate image path"))
            continue
        seen.add(key)
        try:
            load_sample(rec, root)
        except DataError as exc:
            errors.append(RecordError(i, key, str(exc)))
            continue
        good.append(rec)
    return IngestResult(manifest=DatasetManifest(records=good, split=split), errors=errors)


def load_samples(manifest: DatasetManifest, root: Path) -> list[Sample]:
    return [load_sample(rec, root) for rec in manifest.records]


def split_dataset(
    manifest: DatasetManifest, ratios: tuple[float, float, float], seed: int
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Disjoint, exhaustive train/val/test partition with a seeded shuffle.

    Val and test sizes are floor-rounded; the remainder goes to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(manifest.records)
    n_val = int(np.floor(n * ratios[1]))
    n_test = int(np.floor(n * ratios[2]))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(
            f"{n} records cannot fill splits of ratios {ratios} with >= 1 record each"
        )
    return _partition(manifest, (n_train, n_val, n_test), seed)


def split_dataset_by_counts(
    manifest: DatasetManifest, counts: tuple[int, int, int], seed: int
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    if sum(counts) != len(manifest.records):
        raise ValueError(
            f"counts {counts} must sum to the number of records {len(manifest.records)}"
        )
    if min(counts) < 1:
        raise ValueError("each split needs at least one record")
    return _partition(manifest, counts, seed)


def _partition(manifest, counts, seed):
    order = np.random.default_rng(np.random.SeedSequence([seed, 0xD5])).permutation(
        len(manifest.records)
    )
    picked = [manifest.records[i] for i in order]
    n_train, n_val, n_test = counts
    return (
        DatasetManifest(records=picked[:n_train], split="train"),
        DatasetManifest(records=picked[n_train : n_train + n_val], split="val"),
        DatasetManifest(records=picked[n_train + n_val :], split="test"),
    )

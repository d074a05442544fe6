"""Lung-zone vocabulary: six regions over {left, right} x {upper, middle, lower}.

The canonical region order is [left-upper, left-middle, left-lower,
right-upper, right-middle, right-lower]; every 6-bit location label in the
project is indexed this way. "Left" means the left half of the image (columns
below the mid line); no anatomical convention is implied.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

SIDES = ("left", "right")
ZONES = ("upper", "middle", "lower")

N_REGIONS = 6


@dataclass(frozen=True)
class LungRegion:
    side: str
    zone: str

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"unknown side {self.side!r}")
        if self.zone not in ZONES:
            raise ValueError(f"unknown zone {self.zone!r}")

    @property
    def index(self) -> int:
        return 3 * SIDES.index(self.side) + ZONES.index(self.zone)

    @property
    def phrase(self) -> str:
        """Zone phrase as it appears in reports, e.g. ``"upper left lung"``."""
        return f"{self.zone} {self.side} lung"


REGIONS: tuple[LungRegion, ...] = tuple(
    LungRegion(side, zone) for side, zone in product(SIDES, ZONES)
)

# Label = 6 binary ints in canonical region order.
LocationLabel = tuple  # tuple[int, int, int, int, int, int]


def as_label(bits) -> tuple:
    """Validate and normalize a 6-bit location label to a tuple of ints."""
    bits = tuple(int(b) for b in bits)
    if len(bits) != N_REGIONS:
        raise ValueError(f"label must have {N_REGIONS} entries, got {len(bits)}")
    if any(b not in (0, 1) for b in bits):
        raise ValueError(f"label entries must be 0 or 1, got {bits}")
    return bits


def all_labels():
    """All 64 location labels in lexicographic order."""
    return [as_label(((i >> (5 - k)) & 1) for k in range(6)) for i in range(64)]


def zone_box(region: LungRegion, image_size: int) -> tuple[int, int, int, int]:
    """Pixel rectangle (r0, r1, c0, c1), half-open, covered by a region.

    Rows are split into three equal-height bands, columns into halves at the
    mid line.
    """
    h = image_size
    band = h / 3.0
    zi = ZONES.index(region.zone)
    r0, r1 = int(round(zi * band)), int(round((zi + 1) * band))
    half = image_size // 2
    c0, c1 = (0, half) if region.side == "left" else (half, image_size)
    return r0, r1, c0, c1


def label_from_mask(mask: np.ndarray) -> tuple:
    """6-bit label with bit i set iff the mask has a nonzero pixel in region i."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ValueError(f"mask must be square 2-D, got shape {mask.shape}")
    size = mask.shape[0]
    bits = []
    for region in REGIONS:
        r0, r1, c0, c1 = zone_box(region, size)
        bits.append(int(np.any(mask[r0:r1, c0:c1])))
    return tuple(bits)

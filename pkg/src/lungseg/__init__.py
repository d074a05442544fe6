"""Lung-zone lesion segmentation workbench.

Trains a text-guided segmentation network on image/report pairs, trains a
weakly supervised zone detector from report-derived labels, and at inference
time feeds the segmenter a report generated by the detector, so no text input
is needed.
"""

__version__ = "0.1.0"

from .regions import REGIONS, LungRegion, label_from_mask
from .reports import parse_report, synthesize_report

__all__ = [
    "REGIONS",
    "LungRegion",
    "label_from_mask",
    "parse_report",
    "synthesize_report",
    "__version__",
]

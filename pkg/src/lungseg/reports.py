"""Report grammar: synthesis from 6-zone labels, rule-based parsing back to
labels, bag-of-words embeddings, and corpus-level pseudo-labeling with a
clustering audit.

The grammar is a small fixed template set:

    "No pulmonary infection."
    "Unilateral pulmonary infection, one infected area, middle left lung."
    "Bilateral pulmonary infection, two infected areas, upper left lung and
     lower right lung."

Zone phrases are listed in canonical region order and joined with commas and
a final "and". The grammar is unambiguous: every well-formed report maps to
exactly one label, and parse(synthesize(label)) == label for all 64 labels.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .regions import N_REGIONS, REGIONS, as_label

COUNT_WORDS = ("one", "two", "three", "four", "five", "six")

# Every word the grammar can produce, lowercase, plus the two punctuation
# tokens. The embedding vocabulary is this list plus an out-of-vocabulary
# bucket at the end.
GRAMMAR_WORDS = (
    "no",
    "pulmonary",
    "infection",
    "unilateral",
    "bilateral",
    *COUNT_WORDS,
    "infected",
    "area",
    "areas",
    "upper",
    "middle",
    "lower",
    "left",
    "right",
    "lung",
    "and",
    ",",
    ".",
)
OOV_BUCKET = "[OOV]"
EMBED_VOCAB = GRAMMAR_WORDS + (OOV_BUCKET,)
EMBED_DIM = len(EMBED_VOCAB)

_TOKEN_RE = re.compile(r"[a-z]+|[,.]")


def tokenize(text: str) -> list[str]:
    """Lowercase word/punctuation tokens; anything else is dropped."""
    return _TOKEN_RE.findall(text.lower())


def synthesize_report(label) -> str:
    """Render a 6-bit location label as a report in the fixed grammar."""
    label = as_label(label)
    zones = [REGIONS[i].phrase for i in range(N_REGIONS) if label[i]]
    if not zones:
        return "No pulmonary infection."
    sides = {REGIONS[i].side for i in range(N_REGIONS) if label[i]}
    status = "Unilateral" if len(sides) == 1 else "Bilateral"
    count = len(zones)
    noun = "infected area" if count == 1 else "infected areas"
    if len(zones) == 1:
        zone_list = zones[0]
    else:
        zone_list = ", ".join(zones[:-1]) + " and " + zones[-1]
    return f"{status} pulmonary infection, {COUNT_WORDS[count - 1]} {noun}, {zone_list}."


@dataclass
class ParsedReport:
    label: tuple
    warnings: list[str] = field(default_factory=list)


def parse_report_detailed(text: str) -> ParsedReport:
    """Extract the 6-bit label from a report, with consistency warnings.

    Bit i is set iff the text contains region i's zone phrase
    (case-insensitive, whitespace-normalized). Zone phrases always win;
    status and count clauses are only cross-checked and reported as
    warnings. Never raises: unparseable text yields the all-zero label
    plus a warning.
    """
    normalized = " ".join(tokenize(text))
    warnings: list[str] = []

    bits = [0] * N_REGIONS
    for region in REGIONS:
        if region.phrase in normalized:
            bits[region.index] = 1
    label = tuple(bits)

    no_infection = "no pulmonary infection" in normalized
    unilateral = "unilateral" in normalized
    bilateral = "bilateral" in normalized

    sides = {REGIONS[i].side for i in range(N_REGIONS) if label[i]}
    count = sum(label)

    if count == 0:
        if not no_infection:
            warnings.append("no zone phrases recognized; defaulting to all-zero label")
    else:
        if no_infection:
            warnings.append("report claims no infection but names zones")
        if unilateral and len(sides) != 1:
            warnings.append(f"status says unilateral but {len(sides)} sides are named")
        if bilateral and len(sides) != 2:
            warnings.append(f"status says bilateral but {len(sides)} side(s) are named")
        if not (unilateral or bilateral or no_infection):
            warnings.append("no infection-status clause found")
        stated = [w for w in COUNT_WORDS if re.search(rf"\b{w}\b", normalized)]
        if stated and COUNT_WORDS.index(stated[0]) + 1 != count:
            warnings.append(
                f"count clause says {stated[0]} but {count} zone(s) are named"
            )
    return ParsedReport(label=label, warnings=warnings)


def parse_report(text: str) -> tuple:
    """6-bit location label extracted from a report (see parse_report_detailed)."""
    return parse_report_detailed(text).label


def embed_report(text: str) -> np.ndarray:
    """Bag-of-words count vector over the grammar vocabulary, L2-normalized.

    Out-of-vocabulary tokens share one bucket. The empty text maps to the
    zero vector.
    """
    vec = np.zeros(EMBED_DIM, dtype=np.float64)
    index = {w: i for i, w in enumerate(GRAMMAR_WORDS)}
    for tok in tokenize(text):
        vec[index.get(tok, EMBED_DIM - 1)] += 1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


@dataclass
class CorpusAudit:
    """Diagnostic clustering summary attached to a pseudo-labeled corpus."""

    clustered: bool
    reason: str
    n_clusters: int = 0
    noise_count: int = 0
    cluster_sizes: dict[int, int] = field(default_factory=dict)
    cluster_purity: dict[int, float] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"clustered = {str(self.clustered).lower()}", f"reason = {self.reason}"]
        if self.clustered:
            out.append(f"n_clusters = {self.n_clusters}")
            out.append(f"noise_count = {self.noise_count}")
            for cid in sorted(self.cluster_purity):
                out.append(
                    f"cluster_{cid} = size {self.cluster_sizes[cid]}, "
                    f"purity {self.cluster_purity[cid]:.4f}"
                )
        return out


def pseudo_label_corpus(
    reports: list[str],
    min_cluster_size: int = 5,
    min_samples: int = 2,
) -> tuple[list[tuple], CorpusAudit]:
    """Labels for a report corpus plus a clustering-based audit.

    Labels come from the rule-based parser. The audit embeds every report,
    clusters the embeddings, and reports per-cluster purity (the fraction of
    members sharing the cluster's modal label). Purity is diagnostic only
    and never alters the returned labels.
    """
    from .clustering import hdbscan_cluster

    if not reports:
        raise ValueError("corpus must contain at least one report")
    labels = [parse_report(r) for r in reports]

    if len(reports) < max(min_cluster_size, 2):
        audit = CorpusAudit(clustered=False, reason="skipped: insufficient data")
        return labels, audit

    vectors = np.stack([embed_report(r) for r in reports])
    assignment = hdbscan_cluster(vectors, min_cluster_size, min_samples)
    sizes: dict[int, int] = {}
    purity: dict[int, float] = {}
    for cid in sorted(set(assignment.labels) - {-1}):
        members = [i for i, c in enumerate(assignment.labels) if c == cid]
        counts = Counter(labels[i] for i in members)
        sizes[cid] = len(members)
        purity[cid] = counts.most_common(1)[0][1] / len(members)
    audit = CorpusAudit(
        clustered=True,
        reason="ok",
        n_clusters=len(sizes),
        noise_count=int(np.sum(assignment.labels == -1)),
        cluster_sizes=sizes,
        cluster_purity=purity,
    )
    return labels, audit

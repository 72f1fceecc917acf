"""Dataset types and CSV ingestion for the biomarker meta-analysis models.

A study can report a treatment effect for the biomarker-positive subgroup,
the biomarker-negative subgroup, or the pooled (biomarker-mixed) population.
Mixed-population estimates must come with a Beta prior on the proportion of
biomarker-negative patients, since that proportion drives the interpolation
back to the biomarker-positive scale.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from importlib import resources

__all__ = [
    "DataError",
    "ParseError",
    "ValidationError",
    "EffectEstimate",
    "ProportionPrior",
    "StudyRecord",
    "MetaDataset",
    "parse_dataset",
    "serialize_dataset",
    "classify_blocks",
    "load_bundled",
    "BUNDLED_DATASETS",
]

CSV_HEADER = [
    "study",
    "y_pos",
    "se_pos",
    "y_neg",
    "se_neg",
    "y_mix",
    "se_mix",
    "prop_alpha",
    "prop_beta",
]

BUNDLED_DATASETS = ("mcrc_os_main", "mcrc_pfs_main", "mcrc_os_sens", "mcrc_pfs_sens")


class DataError(ValueError):
    """Base class for dataset construction failures."""


class ParseError(DataError):
    """Malformed CSV cell or header; carries row/column context."""


class ValidationError(DataError):
    """Structurally valid input that violates a dataset invariant."""


@dataclass(frozen=True)
class EffectEstimate:
    """A log-scale treatment effect (logHR) with its standard error."""

    y: float
    se: float

    def __post_init__(self):
        if not math.isfinite(self.y):
            raise ValidationError(f"effect estimate must be finite, got y={self.y}")
        if not (math.isfinite(self.se) and self.se > 0):
            raise ValidationError(f"standard error must be finite and > 0, got se={self.se}")

    @property
    def variance(self) -> float:
        return self.se * self.se


@dataclass(frozen=True)
class ProportionPrior:
    """Beta(alpha, beta) prior on a proportion in (0, 1)."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ValidationError(f"beta shape alpha must be > 0, got {self.alpha}")
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValidationError(f"beta shape beta must be > 0, got {self.beta}")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def variance(self) -> float:
        s = self.alpha + self.beta
        return self.alpha * self.beta / (s * s * (s + 1.0))


@dataclass(frozen=True)
class StudyRecord:
    """One trial's reported effects, at most one per population.

    Mixed estimates are mutually exclusive with subgroup estimates: a study
    reporting all three analyses has to be reduced to one or the other before
    it enters a dataset, otherwise the correlated duplicates would be pooled
    as if independent.
    """

    study_id: str
    positive: EffectEstimate | None = None
    negative: EffectEstimate | None = None
    mixed: EffectEstimate | None = None
    proportion_prior: ProportionPrior | None = None

    def __post_init__(self):
        if not self.study_id:
            raise ValidationError("study_id must be non-empty")
        if self.positive is None and self.negative is None and self.mixed is None:
            raise ValidationError(f"study '{self.study_id}': no estimates")
        if self.mixed is not None and (self.positive is not None or self.negative is not None):
            raise ValidationError(
                f"study '{self.study_id}': mixed estimate cannot be combined with "
                "subgroup estimates (reduce to one reporting pattern)"
            )
        if self.mixed is not None and self.proportion_prior is None:
            raise ValidationError(
                f"study '{self.study_id}': mixed estimate requires a proportion prior"
            )

    @property
    def block(self) -> str:
        """Reporting pattern: 'pos_only', 'both', 'neg_only' or 'mixed'."""
        if self.mixed is not None:
            return "mixed"
        if self.positive is not None and self.negative is not None:
            return "both"
        if self.positive is not None:
            return "pos_only"
        return "neg_only"


@dataclass(frozen=True)
class MetaDataset:
    """Validated, ordered collection of study records.

    ``block_counts`` is ``(n_pos_only, n_both, n_neg_only, n_mix)`` and is
    always derived from the records, never supplied by the caller.
    """

    studies: tuple[StudyRecord, ...]
    block_counts: tuple[int, int, int, int]

    @classmethod
    def from_studies(cls, studies) -> "MetaDataset":
        studies = tuple(studies)
        if not studies:
            raise ValidationError("dataset must contain at least one study")
        seen = set()
        for s in studies:
            if s.study_id in seen:
                raise ValidationError(f"duplicate study_id '{s.study_id}'")
            seen.add(s.study_id)
        counts = {"pos_only": 0, "both": 0, "neg_only": 0, "mixed": 0}
        for s in studies:
            counts[s.block] += 1
        return cls(studies, (counts["pos_only"], counts["both"], counts["neg_only"], counts["mixed"]))

    def __len__(self) -> int:
        return len(self.studies)

    @property
    def n_pos_only(self) -> int:
        return self.block_counts[0]

    @property
    def n_both(self) -> int:
        return self.block_counts[1]

    @property
    def n_neg_only(self) -> int:
        return self.block_counts[2]

    @property
    def n_mix(self) -> int:
        return self.block_counts[3]


def classify_blocks(dataset: MetaDataset) -> tuple[int, int, int, int]:
    """Counts of studies by reporting pattern (each study in exactly one block)."""
    return dataset.block_counts


def _parse_cell(raw: str, row: int, col: str) -> float | None:
    text = raw.strip()
    if text == "" or text.upper() == "NA":
        return None
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"row {row}, column '{col}': cannot parse '{raw}' as a number") from None


def parse_dataset(csv_text: str) -> MetaDataset:
    """Parse the canonical CSV format into a validated dataset.

    Header must be ``study,y_pos,se_pos,y_neg,se_neg,y_mix,se_mix,prop_alpha,prop_beta``;
    empty cells and the literal ``NA`` both mean absent. Study order is preserved.
    """
    reader = csv.reader(io.StringIO(csv_text))
    rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError("empty input")
    header = [c.strip() for c in rows[0]]
    if header != CSV_HEADER:
        raise ParseError(f"bad header {header!r}, expected {CSV_HEADER!r}")

    studies = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(CSV_HEADER):
            raise ParseError(f"row {i}: expected {len(CSV_HEADER)} cells, got {len(row)}")
        study_id = row[0].strip()
        if not study_id:
            raise ParseError(f"row {i}: empty study id")
        vals = {col: _parse_cell(cell, i, col) for col, cell in zip(CSV_HEADER[1:], row[1:])}

        def estimate(ycol, scol):
            y, se = vals[ycol], vals[scol]
            if (y is None) != (se is None):
                raise ValidationError(
                    f"study '{study_id}': {ycol}/{scol} must both be present or both absent"
                )
            return None if y is None else EffectEstimate(y, se)

        prior = None
        if (vals["prop_alpha"] is None) != (vals["prop_beta"] is None):
            raise ValidationError(
                f"study '{study_id}': prop_alpha/prop_beta must both be present or both absent"
            )
        if vals["prop_alpha"] is not None:
            prior = ProportionPrior(vals["prop_alpha"], vals["prop_beta"])
        studies.append(
            StudyRecord(
                study_id=study_id,
                positive=estimate("y_pos", "se_pos"),
                negative=estimate("y_neg", "se_neg"),
                mixed=estimate("y_mix", "se_mix"),
                proportion_prior=prior,
            )
        )
    return MetaDataset.from_studies(studies)


def _fmt(x: float | None) -> str:
    return "NA" if x is None else repr(x)


def serialize_dataset(dataset: MetaDataset) -> str:
    """Inverse of :func:`parse_dataset` up to NA/whitespace normalisation."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for s in dataset.studies:
        pos = s.positive
        neg = s.negative
        mix = s.mixed
        prior = s.proportion_prior
        writer.writerow(
            [
                s.study_id,
                _fmt(pos.y if pos else None),
                _fmt(pos.se if pos else None),
                _fmt(neg.y if neg else None),
                _fmt(neg.se if neg else None),
                _fmt(mix.y if mix else None),
                _fmt(mix.se if mix else None),
                _fmt(prior.alpha if prior else None),
                _fmt(prior.beta if prior else None),
            ]
        )
    return buf.getvalue()


def load_bundled(name: str) -> MetaDataset:
    """Load one of the shipped mCRC datasets by stem name (see BUNDLED_DATASETS)."""
    if name not in BUNDLED_DATASETS:
        raise ValidationError(f"unknown bundled dataset '{name}', options: {BUNDLED_DATASETS}")
    text = resources.files("biomarker_meta.data").joinpath(f"{name}.csv").read_text()
    return parse_dataset(text)

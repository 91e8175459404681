"""
Metrics and reports for attack campaigns: ASR, PSNR, per-image CSV records, aggregates,
confidence-margin tables, probability histograms and ASR-vs-PSNR curves.

Perturbation norms are stored in [0, 1] pixel units; PSNR applies the 0–255 scale.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from config import settings

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ReportError(ValueError):
    """Malformed or empty results input."""


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def psnr_from_norm(l2_norm: float, pixel_count: int, pixel_scale: Optional[float] = None) -> float:
    """20·log₁₀(255·√pixel_count / ‖δ‖₂) with ‖δ‖₂ given in [0, 1] units; +inf for ‖δ‖₂ = 0."""
    if pixel_count <= 0:
        raise ValueError(f"pixel_count must be positive, got {pixel_count}")
    scale = settings.pixel_max if pixel_scale is None else pixel_scale
    if l2_norm == 0.0:
        return math.inf
    return 20.0 * math.log10(scale * math.sqrt(pixel_count) / (scale * l2_norm))


def psnr(delta, pixel_count: Optional[int] = None, pixel_scale: Optional[float] = None) -> float:
    """PSNR of a perturbation in [0, 1] units; pixel_count defaults to the entries of delta."""
    delta = np.asarray(delta, dtype=np.float64)
    count = delta.size if pixel_count is None else pixel_count
    return psnr_from_norm(float(np.linalg.norm(delta)), count, pixel_scale)


def attack_success_rate(results: Sequence[Any]) -> float:
    """Successes over attempts; anything with a boolean `success` attribute counts."""
    if not results:
        raise ValueError("Cannot compute an attack success rate over no results")
    return sum(1 for r in results if r.success) / len(results)


# ---------------------------------------------------------------------------
# Per-image records
# ---------------------------------------------------------------------------

class EvaluationRecord(BaseModel):
    """One results-CSV row."""
    image_id: int
    true_class: int
    target_class: int
    attack: str
    lambda_start: float
    n: int
    epsilon: float
    m: int
    c: float
    success: bool
    l2_norm: float
    psnr_db: float
    prob_true_before: float
    prob_true_after: float
    prob_target_before: float
    prob_target_after: float

    @classmethod
    def from_result(cls, result) -> "EvaluationRecord":
        cfg = result.config
        return cls(
            image_id=result.image_id,
            true_class=result.true_class,
            target_class=result.target_class,
            attack=result.kind.value,
            lambda_start=cfg.lambda_start,
            n=cfg.binary_search_steps,
            epsilon=cfg.step_size,
            m=cfg.max_iterations,
            c=cfg.confidence,
            success=result.success,
            l2_norm=result.l2_norm,
            psnr_db=result.psnr_db,
            prob_true_before=result.prob_true_before,
            prob_true_after=result.prob_true_after,
            prob_target_before=result.prob_target_before,
            prob_target_after=result.prob_target_after,
        )

    def parameter_key(self) -> Tuple[str, float, int, int, float]:
        return (self.attack, self.lambda_start, self.n, self.m, self.c)


CSV_FIELDS = list(EvaluationRecord.model_fields)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_records(path: PathLike, records: Iterable[EvaluationRecord], append: bool = False) -> int:
    """Write rows (header first unless appending to a non-empty file); returns the row count."""
    path = Path(path)
    need_header = not (append and path.exists() and path.stat().st_size > 0)
    count = 0
    with open(path, "a" if append else "w", newline="") as f:
        writer = csv.writer(f)
        if need_header:
            writer.writerow(CSV_FIELDS)
        for record in records:
            writer.writerow([_format(getattr(record, name)) for name in CSV_FIELDS])
            count += 1
    return count


def read_records(paths: Union[PathLike, Sequence[PathLike]]) -> List[EvaluationRecord]:
    """Read and validate one or more results CSVs; their rows are concatenated."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    records: List[EvaluationRecord] = []
    for path in paths:
        try:
            with open(path, newline="") as f:
                reader = csv.DictReader(f)
                if reader.fieldnames is None or list(reader.fieldnames) != CSV_FIELDS:
                    raise ReportError(f"{path}: header does not match the results schema")
                for line_no, row in enumerate(reader, start=2):
                    try:
                        records.append(EvaluationRecord(**row))
                    except ValidationError as e:
                        raise ReportError(f"{path}:{line_no}: malformed row: {e.errors()[0]['msg']}")
        except OSError as e:
            raise ReportError(f"Cannot read {path}: {e}")
    return records


# ---------------------------------------------------------------------------
# Aggregates
# ---------------------------------------------------------------------------

def _finite_mean(values: Iterable[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.nan


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else math.nan


@dataclass
class AggregateRow:
    """Summary of one (attack, λ₁, n, m, c) group. PSNR means skip the +inf of δ = 0."""
    attack: str
    lambda_start: float
    n: int
    m: int
    c: float
    attempts: int = 0
    successes: int = 0
    asr: float = 0.0
    mean_psnr_successes: float = math.nan
    mean_psnr_all: float = math.nan
    mean_l2_successes: float = math.nan
    prob_true_before: float = math.nan
    prob_true_after: float = math.nan
    prob_target_before: float = math.nan
    prob_target_after: float = math.nan
    empty: bool = field(default=False)

    def as_row(self) -> Dict[str, Any]:
        return dict(self.__dict__)


AGGREGATE_FIELDS = list(AggregateRow.__dataclass_fields__)


def summarize(records: Sequence[EvaluationRecord]) -> AggregateRow:
    """
    Aggregate one parameter group. B-columns average every attacked image; A-columns and
    PSNR-over-successes only the successful ones, i.e. those reaching the margin c.
    """
    if not records:
        raise ReportError("Cannot summarize an empty record group")
    first = records[0]
    wins = [r for r in records if r.success]
    return AggregateRow(
        attack=first.attack, lambda_start=first.lambda_start, n=first.n, m=first.m, c=first.c,
        attempts=len(records),
        successes=len(wins),
        asr=attack_success_rate(records),
        mean_psnr_successes=_finite_mean(r.psnr_db for r in wins),
        mean_psnr_all=_finite_mean(r.psnr_db for r in records),
        mean_l2_successes=_mean([r.l2_norm for r in wins]),
        prob_true_before=_mean([r.prob_true_before for r in records]),
        prob_true_after=_mean([r.prob_true_after for r in wins]),
        prob_target_before=_mean([r.prob_target_before for r in records]),
        prob_target_after=_mean([r.prob_target_after for r in wins]),
        empty=not wins,
    )


def aggregate_records(records: Sequence[EvaluationRecord]) -> List[AggregateRow]:
    """One row per (attack, λ₁, n, m, c), in order of first appearance."""
    if not records:
        raise ReportError("No records to aggregate")
    groups: Dict[Tuple, List[EvaluationRecord]] = {}
    for record in records:
        groups.setdefault(record.parameter_key(), []).append(record)
    return [summarize(group) for group in groups.values()]


def confidence_table(records: Sequence[EvaluationRecord],
                     confidences: Optional[Sequence[float]] = None) -> List[AggregateRow]:
    """
    One row per confidence margin c. Rows with no successful attack are flagged `empty`;
    a requested c with no records at all yields an empty row with zero attempts.
    """
    by_c: Dict[float, List[EvaluationRecord]] = {}
    for record in records:
        by_c.setdefault(record.c, []).append(record)
    wanted = sorted(by_c) if confidences is None else [float(c) for c in confidences]
    rows = []
    for c in wanted:
        group = by_c.get(c, [])
        if group:
            rows.append(summarize(group))
        else:
            attack = records[0].attack if records else ""
            rows.append(AggregateRow(attack=attack, lambda_start=math.nan, n=0, m=0, c=c, empty=True))
    return rows


def write_rows(path: PathLike, fields: Sequence[str], rows: Iterable[Dict[str, Any]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fields))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format(v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# Distributions and curves
# ---------------------------------------------------------------------------

def probability_histogram(values: Sequence[float], bins: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Equal-width bins over [0, 1] (the last bin includes 1.0); returns (edges, counts)."""
    values = np.asarray(values, dtype=np.float64)
    bins = settings.histogram_bins if bins is None else bins
    if bins < 1:
        raise ValueError(f"Need at least one bin, got {bins}")
    if values.size and (values.min() < 0.0 or values.max() > 1.0 or not np.all(np.isfinite(values))):
        raise ValueError("Probabilities must lie in [0, 1]")
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return edges, counts


def asr_vs_psnr_curve(records: Sequence[Any], thresholds: Sequence[float]) -> List[Tuple[float, float]]:
    """(τ, fraction of all attempts that succeeded with psnr_db ≥ τ) for each τ."""
    if not records:
        return [(float(tau), 0.0) for tau in thresholds]
    total = len(records)
    return [
        (float(tau), sum(1 for r in records if r.success and r.psnr_db >= tau) / total)
        for tau in thresholds
    ]


def write_two_columns(path: PathLike, header: Tuple[str, str], points: Iterable[Tuple[Any, Any]]) -> None:
    """Two-column CSV for external plotting."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for a, b in points:
            writer.writerow([_format(a), _format(b)])


def histogram_points(edges: np.ndarray, counts: np.ndarray) -> List[Tuple[float, int]]:
    """(bin center, count) pairs."""
    centers = (edges[:-1] + edges[1:]) / 2.0
    return [(float(c), int(n)) for c, n in zip(centers, counts)]

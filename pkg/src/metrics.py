"""
Earmark - Correlation Metrics

Agreement between CLAPScores and listener targets:

- srcc       Spearman: Pearson over average (fractional) ranks
- lcc        Pearson product-moment correlation
- ktau       Kendall tau-b (tie-corrected)
- score_mse  mean squared error

stratified_report splits a series by source or by subjective score and
reports all four per stratum. A correlation that is undefined for a
stratum (constant series, fewer than 2 items) is reported as None and
rendered as "n/a", never as 0 or NaN.
"""

import json
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import kendalltau, rankdata

try:
    from dataset import TTA_SYSTEMS, Source
    from errors import DatasetFormatError, NonFiniteError, RejectedInputError, UndefinedMetricError
except ModuleNotFoundError:
    from src.dataset import TTA_SYSTEMS, Source
    from src.errors import DatasetFormatError, NonFiniteError, RejectedInputError, UndefinedMetricError

logger = logging.getLogger(__name__)

SCORE_SPLIT_THRESHOLD = 5.0  # on the 0..10 scale; exactly 5 goes to the low stratum


class Scheme(str, Enum):
    ALL = "all"
    NATURAL_VS_SYNTH = "natural_vs_synth"
    PER_SYSTEM = "per_system"
    SCORE_SPLIT_AT_5 = "score_split_at_5"


@dataclass
class ScorePairSeries:
    """
    Paired predicted/target values with optional per-item tags.

    sources is needed by every scheme except ALL. raw_means (0..10 listener
    means) drive the score split; without them the split uses target <= 0.5.
    """

    predicted: np.ndarray
    target: np.ndarray
    sources: Optional[tuple] = None
    raw_means: Optional[np.ndarray] = None
    item_ids: Optional[tuple] = None

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=np.float64).ravel()
        self.target = np.asarray(self.target, dtype=np.float64).ravel()
        n = self.predicted.size
        if self.target.size != n:
            raise RejectedInputError(f"predicted has {n} values, target has {self.target.size}")
        if not (np.all(np.isfinite(self.predicted)) and np.all(np.isfinite(self.target))):
            raise NonFiniteError("score series contains non-finite values")
        if self.sources is not None:
            self.sources = tuple(Source(s) for s in self.sources)
            if len(self.sources) != n:
                raise RejectedInputError(f"expected {n} source tags, got {len(self.sources)}")
        if self.raw_means is not None:
            self.raw_means = np.asarray(self.raw_means, dtype=np.float64).ravel()
            if self.raw_means.size != n:
                raise RejectedInputError(f"expected {n} raw means, got {self.raw_means.size}")
        if self.item_ids is not None:
            self.item_ids = tuple(self.item_ids)

    def __len__(self):
        return self.predicted.size

    @classmethod
    def from_records(cls, records, predicted) -> "ScorePairSeries":
        return cls(
            predicted,
            [r.target for r in records],
            sources=[r.source for r in records],
            raw_means=[r.mean_raw for r in records],
            item_ids=[r.item_id for r in records],
        )

    def subset(self, mask) -> "ScorePairSeries":
        mask = np.asarray(mask, dtype=bool)
        pick = np.flatnonzero(mask)
        return ScorePairSeries(
            self.predicted[mask],
            self.target[mask],
            sources=None if self.sources is None else tuple(self.sources[i] for i in pick),
            raw_means=None if self.raw_means is None else self.raw_means[mask],
            item_ids=None if self.item_ids is None else tuple(self.item_ids[i] for i in pick),
        )


@dataclass
class MetricReport:
    """One stratum's metrics. A None correlation means undefined."""

    stratum: str
    n: int
    srcc: Optional[float] = None
    lcc: Optional[float] = None
    ktau: Optional[float] = None
    mse: Optional[float] = None
    label: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(**data)


# =============================================================================
# METRICS
# =============================================================================

def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2:
        raise UndefinedMetricError(f"correlation needs at least 2 items, got {x.size}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedMetricError("correlation is undefined for a constant series")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.sum(xc * xc))
    sy = np.sqrt(np.sum(yc * yc))
    r = float(np.sum(xc * yc) / (sx * sy))
    return min(1.0, max(-1.0, r))


def srcc(s: ScorePairSeries) -> float:
    """Spearman rank correlation with average ranks for ties."""
    return _pearson(rankdata(s.predicted, method="average"), rankdata(s.target, method="average"))


def lcc(s: ScorePairSeries) -> float:
    """Pearson linear correlation."""
    return _pearson(s.predicted, s.target)


def ktau(s: ScorePairSeries) -> float:
    """
    Kendall tau-b.

    Raises:
        UndefinedMetricError: n < 2 or either series entirely tied
    """
    if len(s) < 2:
        raise UndefinedMetricError(f"Kendall tau needs at least 2 items, got {len(s)}")
    if np.all(s.predicted == s.predicted[0]) or np.all(s.target == s.target[0]):
        raise UndefinedMetricError("Kendall tau is undefined when a series is entirely tied")
    tau = float(kendalltau(s.predicted, s.target, variant="b").statistic)
    if not np.isfinite(tau):
        raise UndefinedMetricError("Kendall tau is undefined for this series")
    return tau


def score_mse(s: ScorePairSeries) -> float:
    if len(s) < 1:
        raise RejectedInputError("MSE needs at least one item")
    return float(np.mean((s.predicted - s.target) ** 2))


def _metric_or_none(fn, s: ScorePairSeries, stratum: str):
    try:
        return fn(s)
    except UndefinedMetricError as e:
        logger.warning("stratum %s: %s undefined (%s)", stratum, fn.__name__.upper(), e)
        return None


def report_for(s: ScorePairSeries, stratum: str) -> MetricReport:
    return MetricReport(
        stratum=stratum,
        n=len(s),
        srcc=_metric_or_none(srcc, s, stratum),
        lcc=_metric_or_none(lcc, s, stratum),
        ktau=_metric_or_none(ktau, s, stratum),
        mse=score_mse(s) if len(s) else None,
    )


# =============================================================================
# STRATIFICATION
# =============================================================================

def _require_sources(s: ScorePairSeries, scheme: Scheme):
    if s.sources is None:
        raise RejectedInputError(f"scheme {scheme.value} needs a source tag for every item")
    return np.array([src.value for src in s.sources], dtype=str)


def _natural_mask(s: ScorePairSeries) -> np.ndarray:
    return np.array([src is Source.NATURAL for src in s.sources], dtype=bool)


def stratified_report(s: ScorePairSeries, scheme=Scheme.ALL) -> list:
    """
    One MetricReport per stratum of the chosen scheme.

    Strata:
        ALL               all
        NATURAL_VS_SYNTH  natural, synthesized
        PER_SYSTEM        natural, AudioLDM, AudioLDM2, Tango, Tango2,
                          synthetic_other (only if present), synthesized
        SCORE_SPLIT_AT_5  score<=5/{all,natural,synthesized},
                          score>5/{all,natural,synthesized}

    Raises:
        RejectedInputError: Unknown scheme or missing tags
    """
    try:
        scheme = Scheme(scheme)
    except ValueError:
        raise RejectedInputError(f"unknown scheme {scheme!r}; choose from {[m.value for m in Scheme]}") from None

    if scheme is Scheme.ALL:
        return [report_for(s, "all")]

    tags = _require_sources(s, scheme)
    natural = _natural_mask(s)

    if scheme is Scheme.NATURAL_VS_SYNTH:
        return [report_for(s.subset(natural), "natural"), report_for(s.subset(~natural), "synthesized")]

    if scheme is Scheme.PER_SYSTEM:
        reports = [report_for(s.subset(natural), "natural")]
        systems = list(TTA_SYSTEMS)
        if np.any(tags == Source.SYNTHETIC_OTHER.value):
            systems.append(Source.SYNTHETIC_OTHER)
        for system in systems:
            reports.append(report_for(s.subset(tags == system.value), system.value))
        reports.append(report_for(s.subset(~natural), "synthesized"))
        return reports

    if s.raw_means is not None:
        low = s.raw_means <= SCORE_SPLIT_THRESHOLD
    else:
        low = s.target <= SCORE_SPLIT_THRESHOLD / 10.0
    reports = []
    for name, band in (("score<=5", low), ("score>5", ~low)):
        reports.append(report_for(s.subset(band), f"{name}/all"))
        reports.append(report_for(s.subset(band & natural), f"{name}/natural"))
        reports.append(report_for(s.subset(band & ~natural), f"{name}/synthesized"))
    return reports


# =============================================================================
# OUTPUT
# =============================================================================

def _cell(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def format_table(reports, title: Optional[str] = None) -> str:
    """
    Fixed-width table with columns SRCC LCC KTAU MSE.

    A model column is added when any report carries a label.
    """
    labelled = any(r.label for r in reports)
    header = []
    if labelled:
        header.append(f"{'model':<16}")
    header.append(f"{'stratum':<24}{'n':>6}{'SRCC':>9}{'LCC':>9}{'KTAU':>9}{'MSE':>9}")
    lines = []
    if title:
        lines.append(title)
    lines.append("".join(header))
    lines.append("-" * len(lines[-1]))
    for r in reports:
        row = f"{(r.label or ''):<16}" if labelled else ""
        row += f"{r.stratum:<24}{r.n:>6}{_cell(r.srcc):>9}{_cell(r.lcc):>9}{_cell(r.ktau):>9}{_cell(r.mse):>9}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def write_reports(path, reports, label: Optional[str] = None):
    """Write one JSON object per report (sorted keys), optionally stamping a label."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        for report in reports:
            data = report.to_dict()
            if label is not None:
                data["label"] = label
            handle.write(json.dumps(data, sort_keys=True, allow_nan=False) + "\n")


def read_reports(path) -> list:
    path = Path(path)
    reports = []
    with path.open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                reports.append(MetricReport.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as e:
                raise DatasetFormatError(f"not a metric record ({e})", path, line_number) from e
    return reports

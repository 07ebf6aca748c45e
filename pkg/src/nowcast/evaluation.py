"""Ground-truth trend labels, confusion tables and interval coverage."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .posterior import NowcastSummary

WEEK = 7
HISTORY_DAYS = 21
REGIONS = ("incomplete", "last7")
REGION_ALIASES = {"last30": "incomplete"}


def true_increase(full_counts) -> bool:
    """True iff the last week's cases strictly exceed the first week of the last 21 days."""
    y = np.asarray(full_counts)
    if y.ndim != 1 or len(y) < HISTORY_DAYS:
        raise ValueError(f"need at least {HISTORY_DAYS} days of complete counts, got {len(y)}")
    recent = y[-WEEK:].sum()
    earlier = y[-HISTORY_DAYS:-HISTORY_DAYS + WEEK].sum()
    return bool(recent > earlier)


@dataclass(frozen=True)
class ConfusionCounts:
    method: str
    tp: int
    fp: int
    tn: int
    fn: int
    cutpoint: Optional[float] = None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def sensitivity(self) -> Optional[float]:
        pos = self.tp + self.fn
        return self.tp / pos if pos else None

    @property
    def specificity(self) -> Optional[float]:
        neg = self.tn + self.fp
        return self.tn / neg if neg else None


def confusion(flags, truths, method: str = "", cutpoint: float | None = None) -> ConfusionCounts:
    """Tally flags against truths over aligned county-date pairs."""
    f = np.asarray(flags, dtype=bool).ravel()
    y = np.asarray(truths, dtype=bool).ravel()
    if f.shape != y.shape:
        raise ValueError(f"{len(f)} flags but {len(y)} truths")
    return ConfusionCounts(
        method,
        tp=int((f & y).sum()), fp=int((f & ~y).sum()),
        tn=int((~f & ~y).sum()), fn=int((~f & y).sum()),
        cutpoint=cutpoint,
    )


def _region_columns(region: str, n_days: int) -> slice:
    region = REGION_ALIASES.get(region, region)
    if region == "incomplete":
        return slice(0, n_days)
    if region == "last7":
        return slice(max(n_days - WEEK, 0), n_days)
    raise ValueError(f"unknown region {region!r}; expected one of {REGIONS}")


def interval_coverage(nowcasts: NowcastSummary, truth_counts, region: str = "incomplete") -> float:
    """Share of cells whose true total lies inside the interval (ends inclusive).

    ``truth_counts`` is ``(N, K)`` aligned with the nowcast dates, or a longer
    ``(N, T)`` series ending on the same day.
    """
    truth = np.asarray(truth_counts)
    K = len(nowcasts.dates)
    if truth.ndim != 2 or truth.shape[0] != len(nowcasts.county_ids) or truth.shape[1] < K:
        raise ValueError(f"truth shape {truth.shape} does not cover {len(nowcasts.county_ids)} x {K} cells")
    truth = truth[:, truth.shape[1] - K:]
    cols = _region_columns(region, K)
    lo, hi, y = nowcasts.lower[:, cols], nowcasts.upper[:, cols], truth[:, cols]
    inside = (lo <= y) & (y <= hi)
    return float(inside.mean()) if inside.size else float("nan")


@dataclass
class EvaluationReport:
    rows: list = field(default_factory=list)        # ConfusionCounts
    coverage: dict = field(default_factory=dict)    # region -> coverage

    def add(self, counts: ConfusionCounts):
        if self.rows and counts.total != self.rows[0].total:
            raise ValueError("every method must be scored on the same county-date pairs")
        self.rows.append(counts)

    def row(self, method: str, cutpoint: float | None = None) -> ConfusionCounts:
        for r in self.rows:
            if r.method == method and r.cutpoint == cutpoint:
                return r
        raise KeyError((method, cutpoint))


def evaluate(method_flags: dict, truths, coverage: dict | None = None) -> EvaluationReport:
    """Confusion rows for every ``(method, cutpoint) -> flags`` entry."""
    report = EvaluationReport(coverage=dict(coverage or {}))
    for key, flags in method_flags.items():
        method, cutpoint = key if isinstance(key, tuple) else (key, None)
        report.add(confusion(flags, truths, method, cutpoint))
    return report

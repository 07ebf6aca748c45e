"""Rolling-average and spline trend indicators used as comparison methods."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import BSpline

INDICATOR_DAYS = 21
ROLLING_WINDOW = 7
RUN_LENGTH = 5
SPLINE_KNOTS = 4


@dataclass(frozen=True)
class IndicatorResult:
    county_id: str
    method: str
    flagged: bool
    probability: Optional[float] = None
    as_of_date: Optional[dt.date] = None

    def __post_init__(self):
        if self.method not in ("rolling", "spline", "model"):
            raise ValueError(f"unknown method {self.method!r}")
        if (self.probability is not None) != (self.method == "model"):
            raise ValueError("probability is set iff method == 'model'")
        if self.probability is not None and not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")


def _rolling_sums(series: np.ndarray, window: int, n_out: int) -> np.ndarray:
    c = np.concatenate([[0], np.cumsum(series)])
    sums = c[window:] - c[:-window]
    return sums[-n_out:]


def rolling_average(series, window: int = ROLLING_WINDOW, n_days: int = INDICATOR_DAYS) -> np.ndarray:
    """Trailing ``window``-day means for each of the last ``n_days`` days."""
    y = np.asarray(series)
    if y.ndim != 1 or len(y) < n_days + window - 1:
        raise ValueError(f"need at least {n_days + window - 1} daily counts, got {len(y)}")
    if (y < 0).any():
        raise ValueError("counts must be non-negative")
    return _rolling_sums(y, window, n_days) / window


def run_increase_flag(values, prior_value: float, run_length: int = RUN_LENGTH,
                      tol: float = 0.0) -> bool:
    """True iff ``run_length`` consecutive day-over-day increases occur.

    The first value is compared with ``prior_value``. A step counts as an
    increase only if it exceeds the previous value by more than ``tol``.
    """
    seq = np.concatenate([[prior_value], np.asarray(values, dtype=float)])
    up = np.diff(seq) > tol
    run = 0
    for step in up:
        run = run + 1 if step else 0
        if run >= run_length:
            return True
    return False


def rolling_indicator(series, county_id: str = "", as_of_date: dt.date | None = None,
                      run_length: int = RUN_LENGTH) -> IndicatorResult:
    """Flag a county when its 7-day average rose ``run_length`` days in a row.

    Uses the preceding day's average as the baseline for the first window day
    when the series is long enough (28+ days); otherwise the first day cannot
    start a run.
    """
    y = np.asarray(series)
    n = INDICATOR_DAYS
    if len(y) >= n + ROLLING_WINDOW:
        # integer sums keep ties exact
        sums = _rolling_sums(y, ROLLING_WINDOW, n + 1)
        prior, current = sums[0], sums[1:]
    else:
        current = rolling_average(y) * ROLLING_WINDOW
        prior = current[0]
    flagged = run_increase_flag(current, prior, run_length)
    return IndicatorResult(county_id, "rolling", flagged, as_of_date=as_of_date)


def spline_basis(x: np.ndarray, n_knots: int = SPLINE_KNOTS, degree: int = 3) -> np.ndarray:
    """B-spline design matrix with ``n_knots`` equally spaced interior knots."""
    lo, hi = float(x.min()), float(x.max())
    interior = np.linspace(lo, hi, n_knots + 2)[1:-1]
    knots = np.concatenate([[lo] * (degree + 1), interior, [hi] * (degree + 1)])
    return BSpline.design_matrix(x, knots, degree).toarray()


def fit_cubic_spline(y, n_knots: int = SPLINE_KNOTS) -> np.ndarray:
    """Least-squares cubic B-spline fit evaluated at ``x = 1..len(y)``."""
    y = np.asarray(y, dtype=float)
    x = np.arange(1, len(y) + 1, dtype=float)
    B = spline_basis(x, n_knots)
    if B.shape[1] > len(y):
        raise ValueError("too few points for the spline basis")
    coef, _, rank, _ = np.linalg.lstsq(B, y, rcond=None)
    if rank < B.shape[1] or not np.isfinite(coef).all():
        raise np.linalg.LinAlgError("spline least-squares problem is rank deficient")
    return B @ coef


def spline_indicator(series, county_id: str = "", as_of_date: dt.date | None = None,
                     run_length: int = RUN_LENGTH, n_knots: int = SPLINE_KNOTS) -> IndicatorResult:
    """Flag a county when the spline fit to its 7-day averages rises ``run_length`` days in a row."""
    fit = fit_cubic_spline(rolling_average(series), n_knots)
    # rounding noise must not register as an increase
    tol = 1e-9 * float(np.abs(fit).max())
    flagged = run_increase_flag(fit, fit[0], run_length, tol=tol)
    return IndicatorResult(county_id, "spline", flagged, as_of_date=as_of_date)

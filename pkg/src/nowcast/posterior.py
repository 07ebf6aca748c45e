"""Nowcasts, trend probabilities and alert classes from posterior draws."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diagnostics import RHAT_THRESHOLD, diagnostics
from .indicators import IndicatorResult
from .sampler import PosteriorDraws

CUTPOINTS = (0.5, 0.7, 0.9)
QUANTILE_METHOD = "linear"


@dataclass
class NowcastSummary:
    county_ids: tuple
    dates: tuple
    observed: np.ndarray    # (N, K) reported so far
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float = 0.90
    quantile_method: str = QUANTILE_METHOD

    def rows(self):
        for i, c in enumerate(self.county_ids):
            for k, day in enumerate(self.dates):
                yield c, day, int(self.observed[i, k]), self.mean[i, k], self.lower[i, k], self.upper[i, k]


@dataclass
class TrendSummary:
    county_ids: tuple
    probability_increase: np.ndarray
    cutpoints: tuple = CUTPOINTS
    converged: bool = True

    def flags(self, cutpoint: float) -> np.ndarray:
        return self.probability_increase > cutpoint


def trend_sums(draws: PosteriorDraws, window: int = 21) -> np.ndarray:
    """Per-draw sums of the trend over the last ``window`` days, ``(draws, N)``."""
    if "delta" not in draws.samples:
        raise KeyError("trend draws were not monitored")
    delta = draws.pooled("delta")
    if delta.shape[-1] < window:
        raise ValueError(f"only {delta.shape[-1]} trend days monitored, need {window}")
    return delta[..., -window:].sum(axis=-1)


def trend_probability(draws: PosteriorDraws, county: int | str | None = None,
                      window: int = 21):
    """Posterior probability that the summed trend over ``window`` days is positive.

    Returns one value for ``county`` (index or id), or an array over counties.
    """
    p = (trend_sums(draws, window) > 0).mean(axis=0)
    if county is None:
        return p
    if isinstance(county, str):
        county = draws.county_ids.index(county)
    return float(p[county])


def trend_summary(draws: PosteriorDraws, window: int = 21) -> TrendSummary:
    converged = True
    if draws.n_chains > 1 and draws.n_draws >= 4:
        table = diagnostics(draws, names=("delta",), min_draws=4)
        converged = not any(row["rhat"] > RHAT_THRESHOLD for row in table.values())
    return TrendSummary(tuple(draws.county_ids), trend_probability(draws, window=window),
                        converged=converged)


def nowcast_intervals(draws: PosteriorDraws, level: float = 0.90) -> NowcastSummary:
    """Posterior mean and equal-tailed interval of the total for every incomplete day."""
    if "Y" not in draws.samples:
        raise KeyError("latent totals were not monitored")
    y = draws.pooled("Y").astype(float)
    tail = (1.0 - level) / 2.0
    lower, upper = np.quantile(y, [tail, 1.0 - tail], axis=0, method=QUANTILE_METHOD)
    return NowcastSummary(
        tuple(draws.county_ids), tuple(draws.nowcast_dates), draws.partial,
        y.mean(axis=0), lower, upper, level,
    )


def classify(trend: TrendSummary, cutpoint: float, as_of_date=None) -> list:
    """Model-based alerts: flag where the increase probability strictly exceeds ``cutpoint``."""
    if not 0.0 < cutpoint < 1.0:
        raise ValueError("cutpoint must lie in (0, 1)")
    return [
        IndicatorResult(c, "model", bool(p > cutpoint), probability=float(p), as_of_date=as_of_date)
        for c, p in zip(trend.county_ids, trend.probability_increase)
    ]

"""Split R-hat and autocorrelation-based effective sample size."""
from __future__ import annotations

import numpy as np

RHAT_THRESHOLD = 1.05


def _split(x: np.ndarray) -> np.ndarray:
    m, n = x.shape
    half = n // 2
    return np.concatenate([x[:, :half], x[:, n - half:]], axis=0)


def split_rhat(x) -> float:
    """Potential scale reduction on split chains; ``x`` is ``(chains, draws)``.

    NaN when the chains have no within-chain variance.
    """
    x = _split(np.asarray(x, dtype=float))
    n = x.shape[1]
    W = x.var(axis=1, ddof=1).mean()
    B_over_n = x.mean(axis=1).var(ddof=1)
    if not W > 0:
        return float("nan")
    var_plus = (n - 1) / n * W + B_over_n
    return float(np.sqrt(var_plus / W))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = len(x)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    centered = x - x.mean()
    f = np.fft.rfft(centered, size)
    return np.fft.irfft(f * np.conj(f), size)[:n] / n


def effective_sample_size(x) -> float:
    """ESS with Geyer's initial monotone sequence over split chains."""
    x = _split(np.asarray(x, dtype=float))
    m, n = x.shape
    acov = np.array([_autocovariance(c) for c in x])
    W = acov[:, 0].mean() * n / (n - 1)
    var_plus = W * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return float("nan")
    mean_acov = acov.mean(axis=0)
    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even, rho_odd = 1.0, 1.0 - (W - mean_acov[1]) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0:
        rho_even = 1.0 - (W - mean_acov[t + 1]) / var_plus
        rho_odd = 1.0 - (W - mean_acov[t + 2]) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1], rho[t + 2] = rho_even, rho_odd
        t += 2
    max_t = t
    if rho_even > 0 and max_t + 1 < n:
        rho[max_t + 1] = rho_even
    # enforce a monotone sequence of pair sums
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = rho[t + 2] = (rho[t - 1] + rho[t]) / 2.0
        t += 2
    tau = -1.0 + 2.0 * rho[:max_t + 1].sum() + rho[max_t + 1:max_t + 2].sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def scalar_columns(draws, names=None) -> dict:
    """Every monitored scalar as a ``(chains, draws)`` array keyed by a column label."""
    out = {}
    for name, arr in draws.samples.items():
        if names is not None and name not in names:
            continue
        shape = arr.shape[2:]
        if not shape:
            out[name] = arr
            continue
        for idx in np.ndindex(*shape):
            out[f"{name}[{_label(draws, name, idx)}]"] = arr[(slice(None), slice(None)) + idx]
    return out


def _label(draws, name, idx) -> str:
    if name in ("delta", "Y", "alpha") and len(idx) == 2:
        dates = {"delta": draws.trend_dates, "Y": draws.nowcast_dates}.get(name)
        day = dates[idx[1]] if dates is not None else idx[1]
        day = day.isoformat() if hasattr(day, "isoformat") else str(day)
        return f"{draws.county_ids[idx[0]]},{day}"
    return ",".join(str(k) for k in idx)


def diagnostics(draws, names=None, min_draws: int = 100) -> dict:
    """Split R-hat and ESS per monitored scalar.

    R-hat is NaN with a single chain. ``flagged`` marks R-hat above
    :data:`RHAT_THRESHOLD` or an undefined statistic.
    """
    if draws.n_draws < min_draws:
        raise ValueError(f"need at least {min_draws} draws per chain, got {draws.n_draws}")
    table = {}
    for label, x in scalar_columns(draws, names).items():
        ess = effective_sample_size(x)
        rhat = split_rhat(x) if x.shape[0] > 1 else float("nan")
        flagged = bool(np.isnan(ess) or (x.shape[0] > 1 and not rhat <= RHAT_THRESHOLD))
        table[label] = {"ess": ess, "rhat": rhat, "flagged": flagged}
    return table

"""
Joint log-density of the spatio-temporal nowcasting model.

Every block is available as an elementwise term array (used by the sampler
to form local conditionals) and as a per-county scalar evaluator. Arrays use
county-major layout: ``(N, T)`` for state/trend quantities and ``(N, T, D)``
for the logit hazards.
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.special import betaln, expit, gammaln

from .data import (
    CountyGraph,
    ReportingTriangle,
    day_of_week_design,
    report_day_design,
)

LOG_2PI = math.log(2.0 * math.pi)
MAX_ABS_LOG_RATE = 50.0
VARIANCE_COMPONENTS = ("alpha", "delta", "d", "eta", "xi", "psi")


class InvalidStateError(ValueError):
    """A state violates a hard model constraint (e.g. Y below reported count)."""


class DivergentStateError(FloatingPointError):
    """Poisson rate outside the supported range."""


@dataclass
class HyperPriorSpec:
    """Fixed prior constants. Defaults reproduce the published model."""

    delta_bar_var: float = 1.0
    eta_bar_var: float = 1.0
    xi_bar_var: float = 1.0
    beta_var: float = 4.0
    alpha1_mean: float = 0.0
    alpha1_var: float = 100.0
    ig_shape: float = 0.5
    ig_scale: float = 0.5
    # per-component (shape, scale) overrides of the inverse-gamma priors
    ig_overrides: dict = field(default_factory=dict)
    rho_low: float = -1.0
    rho_high: float = 1.0
    phi_shape: float = 1.0
    phi_rate: float = 0.01

    def inverse_gamma(self, component: str) -> tuple[float, float]:
        if component not in VARIANCE_COMPONENTS:
            raise KeyError(component)
        shape, scale = self.ig_overrides.get(component, (self.ig_shape, self.ig_scale))
        return float(shape), float(scale)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ig_overrides"] = {k: list(v) for k, v in sorted(self.ig_overrides.items())}
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> HyperPriorSpec:
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in raw.items() if k in known}
        if "ig_overrides" in kw:
            kw["ig_overrides"] = {k: tuple(v) for k, v in kw["ig_overrides"].items()}
        return cls(**kw)


@dataclass
class ModelData:
    """Observed data and fixed design quantities for one analysis."""

    counts: np.ndarray          # (N, T, D+1) reported counts
    offsets: np.ndarray         # (N,) log population
    adjacency: np.ndarray       # (N, N) 0/1
    X: np.ndarray               # (T, 6) onset-day weekday coding
    V: np.ndarray               # (T, D, 6) report-day weekday coding
    drop_last_day: bool = True
    county_ids: tuple = ()
    onset_dates: tuple = ()
    partial: np.ndarray = field(init=False)      # (N, T) reported so far
    lik_mask: np.ndarray = field(init=False)     # (T, D) delay terms in the likelihood
    cum_before: np.ndarray = field(init=False)   # (N, T, D) sum of Z over delays < d
    complete: np.ndarray = field(init=False)     # (T,) every delay observed
    edges: np.ndarray = field(init=False)        # (E, 2) i < j

    def __post_init__(self):
        N, T, D1 = self.counts.shape
        D = D1 - 1
        t = np.arange(T)[:, None]
        d = np.arange(D1)[None, :]
        observed = t + d <= T - 1
        self.partial = np.where(observed[None], self.counts, 0).sum(axis=2)
        lik = observed[:, :D].copy()
        if self.drop_last_day:
            lik[T - 1] = False
        self.lik_mask = lik
        cum = np.cumsum(np.where(observed[None], self.counts, 0), axis=2)
        self.cum_before = np.concatenate([np.zeros((N, T, 1), dtype=cum.dtype), cum[:, :, :D - 1]], axis=2)
        self.complete = np.arange(T) + D <= T - 1
        i, j = np.nonzero(np.triu(self.adjacency))
        self.edges = np.stack([i, j], axis=1) if len(i) else np.zeros((0, 2), dtype=int)

    @property
    def shape(self) -> tuple[int, int, int]:
        N, T, D1 = self.counts.shape
        return N, T, D1 - 1

    @property
    def latent_days(self) -> np.ndarray:
        """Onset-day indices whose total is not fully reported."""
        return np.nonzero(~self.complete)[0]

    @classmethod
    def from_triangle(cls, tri: ReportingTriangle, graph: CountyGraph,
                      drop_last_day: bool = True) -> ModelData:
        if tuple(tri.county_ids) != tuple(graph.county_ids):
            raise ValueError("triangle and graph list different counties")
        return cls(
            counts=np.asarray(tri.counts, dtype=np.int64),
            offsets=np.asarray(graph.offsets, dtype=float),
            adjacency=np.asarray(graph.adjacency, dtype=float),
            X=day_of_week_design(tri.window),
            V=report_day_design(tri.window),
            drop_last_day=drop_last_day,
            county_ids=tuple(tri.county_ids),
            onset_dates=tuple(tri.onset_dates),
        )

    @classmethod
    def from_counts(cls, counts, graph: CountyGraph, start_date: dt.date,
                    drop_last_day: bool = True) -> ModelData:
        """Build from a (possibly complete) ``N x T x (D+1)`` array, censoring
        cells reported after the last onset day."""
        counts = np.asarray(counts, dtype=np.int64)
        N, T, D1 = counts.shape
        obs = np.arange(T)[:, None] + np.arange(D1)[None, :] <= T - 1
        dates = [start_date + dt.timedelta(days=k) for k in range(T)]
        return cls(
            counts=np.where(obs[None], counts, 0),
            offsets=np.asarray(graph.offsets, dtype=float),
            adjacency=np.asarray(graph.adjacency, dtype=float),
            X=day_of_week_design(dates),
            V=report_day_design(start_date, T, D1 - 1),
            drop_last_day=drop_last_day,
            county_ids=tuple(graph.county_ids),
            onset_dates=tuple(dates),
        )

    def permuted(self, order) -> ModelData:
        order = np.asarray(order)
        return ModelData(
            counts=self.counts[order].copy(),
            offsets=self.offsets[order].copy(),
            adjacency=self.adjacency[np.ix_(order, order)].copy(),
            X=self.X, V=self.V, drop_last_day=self.drop_last_day,
            county_ids=tuple(self.county_ids[k] for k in order) if self.county_ids else (),
            onset_dates=self.onset_dates,
        )


@dataclass
class ModelState:
    alpha: np.ndarray       # (N, T) latent log-rate state
    delta: np.ndarray       # (N, T) local trend
    delta_bar: float        # statewide trend
    d: np.ndarray           # (N,) spatial trend, sums to zero
    eta: np.ndarray         # (N, 6) county onset weekday effects
    eta_bar: np.ndarray     # (6,)
    psi: np.ndarray         # (N, T, D) logit hazards
    beta: np.ndarray        # (D,)
    xi: np.ndarray          # (N, 6) county report weekday effects
    xi_bar: np.ndarray      # (6,)
    rho_delta: float
    rho_psi: float
    phi: np.ndarray         # (D,) dispersions
    tau2_alpha: float
    tau2_delta: float
    tau2_d: float
    tau2_eta: float
    tau2_xi: float
    tau2_psi: float
    Y: np.ndarray           # (N, T) true totals

    def copy(self) -> ModelState:
        return replace(self, **{
            f.name: getattr(self, f.name).copy()
            for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)
        })

    def tau2(self, component: str) -> float:
        return getattr(self, f"tau2_{component}")

    def permuted(self, order) -> ModelState:
        order = np.asarray(order)
        s = self.copy()
        for name in ("alpha", "delta", "d", "eta", "psi", "xi", "Y"):
            setattr(s, name, getattr(self, name)[order].copy())
        return s


# ---------------------------------------------------------------- primitives

def normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (np.asarray(x) - mean) ** 2 / var


def inverse_gamma_logpdf(x: float, shape: float, scale: float) -> float:
    if x <= 0:
        return -np.inf
    return shape * math.log(scale) - math.lgamma(shape) - (shape + 1) * math.log(x) - scale / x


def betabinom_logpmf(k, n, a, b):
    """Beta-binomial log-pmf with success-count ``k`` out of ``n`` trials."""
    k = np.asarray(k, dtype=float)
    n = np.asarray(n, dtype=float)
    return (gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
            + betaln(k + a, n - k + b) - betaln(a, b))


def stick_breaking_mean(nu) -> np.ndarray:
    """Map ``D`` conditional reporting probabilities to ``D + 1`` delay proportions."""
    nu = np.asarray(nu, dtype=float)
    survive = np.concatenate([[1.0], np.cumprod(1.0 - nu)])
    return np.concatenate([nu * survive[:-1], survive[-1:]])


def log_rate(state: ModelState, data: ModelData) -> np.ndarray:
    return data.offsets[:, None] + state.alpha + state.eta @ data.X.T


def hazard_mean(state: ModelState, data: ModelData) -> np.ndarray:
    """Mean of the logit hazards, ``beta_d + V_td . xi_i``, shape (N, T, D)."""
    return state.beta[None, None, :] + np.einsum("tdk,ik->itd", data.V, state.xi)


# ---------------------------------------------------------------- term arrays

def poisson_terms(state: ModelState, data: ModelData) -> np.ndarray:
    loglam = log_rate(state, data)
    Y = state.Y
    out = Y * loglam - np.exp(np.minimum(loglam, MAX_ABS_LOG_RATE)) - gammaln(Y + 1.0)
    return np.where(np.abs(loglam) < MAX_ABS_LOG_RATE, out, -np.inf)


def alpha_terms(state: ModelState, prior: HyperPriorSpec) -> np.ndarray:
    a, dl = state.alpha, state.delta
    out = np.empty_like(a)
    out[:, 0] = normal_logpdf(a[:, 0], prior.alpha1_mean, prior.alpha1_var)
    out[:, 1:] = normal_logpdf(a[:, 1:] - a[:, :-1] - dl[:, :-1], 0.0, state.tau2_alpha)
    return out


def trend_residuals(delta, level, rho) -> np.ndarray:
    """AR(1) innovations of ``delta`` around ``level`` (per-county column)."""
    c = delta - level[:, None]
    r = np.empty_like(delta)
    r[:, 0] = c[:, 0]
    r[:, 1:] = c[:, 1:] - rho * c[:, :-1]
    return r


def delta_terms(state: ModelState) -> np.ndarray:
    r = trend_residuals(state.delta, state.delta_bar + state.d, state.rho_delta)
    return normal_logpdf(r, 0.0, state.tau2_delta)


def psi_residuals(psi, mu, rho) -> np.ndarray:
    c = psi - mu
    r = np.empty_like(psi)
    r[:, 0] = c[:, 0]
    r[:, 1:] = c[:, 1:] - rho * c[:, :-1]
    return r


def psi_terms(state: ModelState, data: ModelData) -> np.ndarray:
    r = psi_residuals(state.psi, hazard_mean(state, data), state.rho_psi)
    return normal_logpdf(r, 0.0, state.tau2_psi)


def delay_terms(state: ModelState, data: ModelData) -> np.ndarray:
    """Sequential beta-binomial terms, zero outside the likelihood mask."""
    D = data.shape[2]
    mask = np.broadcast_to(data.lik_mask[None], state.psi.shape)
    remaining = state.Y[:, :, None] - data.cum_before
    k = data.counts[:, :, :D]
    if (mask & (remaining < k)).any():
        raise InvalidStateError("latent total below the reported count")
    n = np.where(mask, remaining, 0)
    k = np.where(mask, k, 0)
    nu = expit(state.psi)
    out = betabinom_logpmf(k, n, nu * state.phi, (1.0 - nu) * state.phi)
    return np.where(mask, out, 0.0)


def icar_quadratic(d, edges) -> float:
    if len(edges) == 0:
        return 0.0
    diff = d[edges[:, 0]] - d[edges[:, 1]]
    return float(diff @ diff)


def log_icar_prior(d, graph: CountyGraph | ModelData, tau2_d: float, normalized: bool = False) -> float:
    """Pairwise-difference ICAR log-density.

    Unnormalized by default. ``normalized=True`` adds the ``tau2_d``-dependent
    factor of the rank ``N - 1`` Gaussian (still dropping the graph
    determinant, which is constant).
    """
    edges = graph.edges if isinstance(graph, ModelData) else np.array(graph.edges()).reshape(-1, 2)
    q = icar_quadratic(np.asarray(d, dtype=float), edges)
    out = -0.5 * q / tau2_d
    if normalized:
        out -= 0.5 * (len(d) - 1) * (LOG_2PI + math.log(tau2_d))
    return out


def hierarchical_terms(state: ModelState, prior: HyperPriorSpec) -> float:
    return float(
        normal_logpdf(state.eta, state.eta_bar[None], state.tau2_eta).sum()
        + normal_logpdf(state.xi, state.xi_bar[None], state.tau2_xi).sum()
        + normal_logpdf(state.eta_bar, 0.0, prior.eta_bar_var).sum()
        + normal_logpdf(state.xi_bar, 0.0, prior.xi_bar_var).sum()
        + normal_logpdf(state.delta_bar, 0.0, prior.delta_bar_var)
    )


def hyperprior_terms(state: ModelState, prior: HyperPriorSpec) -> float:
    out = 0.0
    for c in VARIANCE_COMPONENTS:
        out += inverse_gamma_logpdf(state.tau2(c), *prior.inverse_gamma(c))
    out += float(normal_logpdf(state.beta, 0.0, prior.beta_var).sum())
    for rho in (state.rho_delta, state.rho_psi):
        if not prior.rho_low < rho < prior.rho_high:
            return -np.inf
        out -= math.log(prior.rho_high - prior.rho_low)
    phi = state.phi
    if (phi <= 0).any():
        return -np.inf
    a, r = prior.phi_shape, prior.phi_rate
    out += float((a * math.log(r) - math.lgamma(a) + (a - 1) * np.log(phi) - r * phi).sum())
    return out


# ---------------------------------------------------------------- scalar API

def log_poisson_outcome(i: int, t: int, state: ModelState, data: ModelData) -> float:
    loglam = data.offsets[i] + state.alpha[i, t] + data.X[t] @ state.eta[i]
    if not abs(loglam) < MAX_ABS_LOG_RATE:
        raise DivergentStateError(f"log rate {loglam} out of range at ({i}, {t})")
    y = state.Y[i, t]
    return float(y * loglam - math.exp(loglam) - math.lgamma(y + 1.0))


def log_latent_prior(i: int, state: ModelState, prior: HyperPriorSpec) -> float:
    s = replace(state, alpha=state.alpha[i:i + 1], delta=state.delta[i:i + 1])
    return float(alpha_terms(s, prior).sum())


def log_trend_prior(i: int, state: ModelState) -> float:
    r = trend_residuals(state.delta[i:i + 1], np.array([state.delta_bar + state.d[i]]), state.rho_delta)
    return float(normal_logpdf(r, 0.0, state.tau2_delta).sum())


def log_psi_prior(i: int, state: ModelState, data: ModelData) -> float:
    return float(psi_terms(state, data)[i].sum())


def log_delay_likelihood(i: int, t: int, state: ModelState, data: ModelData) -> float:
    D = data.shape[2]
    remaining = state.Y[i, t]
    total = 0.0
    for d in range(D):
        if not data.lik_mask[t, d]:
            break
        z = data.counts[i, t, d]
        if remaining < z:
            raise InvalidStateError(f"remaining count {remaining} below Z={z} at ({i}, {t}, {d})")
        nu = expit(state.psi[i, t, d])
        total += float(betabinom_logpmf(z, remaining, nu * state.phi[d], (1 - nu) * state.phi[d]))
        remaining -= z
    return total


def log_hierarchical_effects(state: ModelState, prior: HyperPriorSpec) -> float:
    return hierarchical_terms(state, prior)


def log_joint(state: ModelState, data: ModelData, prior: HyperPriorSpec) -> float:
    """Full joint log-density (up to the constant ICAR graph determinant)."""
    if (state.Y < data.partial).any():
        return -np.inf
    if (state.Y[:, data.complete] != data.partial[:, data.complete]).any():
        return -np.inf
    return float(
        poisson_terms(state, data).sum()
        + alpha_terms(state, prior).sum()
        + delta_terms(state).sum()
        + log_icar_prior(state.d, data, state.tau2_d, normalized=True)
        + psi_terms(state, data).sum()
        + delay_terms(state, data).sum()
        + hierarchical_terms(state, prior)
        + hyperprior_terms(state, prior)
    )


def block_log_densities(state: ModelState, data: ModelData, prior: HyperPriorSpec) -> dict:
    """Named block contributions whose sum is :func:`log_joint`."""
    N = data.shape[0]
    return {
        "outcome": sum(log_poisson_outcome(i, t, state, data)
                       for i in range(N) for t in range(data.shape[1])),
        "latent": sum(log_latent_prior(i, state, prior) for i in range(N)),
        "trend": sum(log_trend_prior(i, state) for i in range(N)),
        "icar": log_icar_prior(state.d, data, state.tau2_d, normalized=True),
        "psi": sum(log_psi_prior(i, state, data) for i in range(N)),
        "delay": sum(log_delay_likelihood(i, t, state, data)
                     for i in range(N) for t in range(data.shape[1])),
        "hierarchical": log_hierarchical_effects(state, prior),
        "hyperprior": hyperprior_terms(state, prior),
    }

"""Forward simulation of line lists from the nowcasting model."""
from __future__ import annotations

import datetime as dt
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import CountyGraph, LineListRecord, day_of_week_design, report_day_design
from .model import VARIANCE_COMPONENTS, HyperPriorSpec, ModelData, ModelState, stick_breaking_mean

FIXABLE = (
    "delta_bar", "d", "delta", "eta_bar", "eta", "xi_bar", "xi", "beta", "phi", "rho_delta", "rho_psi",
    "alpha1", "tau2_alpha", "tau2_delta", "tau2_d", "tau2_eta", "tau2_xi", "tau2_psi",
)


def desk_scenario(D: int) -> dict:
    """Fixed generating values for desk-scale checks.

    Gives roughly 70 cases a day in a county of 200 with a fast first-day
    report and slow tail; the published vague priors are not meant to be
    simulated from directly.
    """
    return dict(
        tau2_alpha=0.005, tau2_delta=1e-4, tau2_d=1e-4, tau2_eta=0.01, tau2_xi=0.01,
        tau2_psi=0.05, rho_delta=0.8, rho_psi=0.5, delta_bar=0.0,
        eta_bar=[0.1, 0.0, 0.0, 0.0, 0.0, -0.1], xi_bar=0.0, alpha1=-1.0,
        beta=[-1.0] + [-1.5] * (D - 1), phi=20.0,
    )


@dataclass
class SimulationConfig:
    """Simulation settings.

    ``fixed`` pins any of :data:`FIXABLE` (scalars broadcast to the right
    shape); everything else is drawn from ``prior``. ``alpha1`` is the
    initial latent state of each county and ``delta`` pins the whole trend
    path, shape ``(T,)`` or ``(N, T)``. Statewide values come from a
    stream seeded by ``seed``; each county's draws come from its own
    stream keyed by ``seed`` and the county id.
    """

    graph: CountyGraph
    T: int
    D: int
    start_date: dt.date = dt.date(2020, 6, 1)
    prior: HyperPriorSpec = field(default_factory=HyperPriorSpec)
    fixed: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.fixed) - set(FIXABLE)
        if unknown:
            raise ValueError(f"cannot fix {sorted(unknown)}")
        if self.D < 1 or self.D >= self.T:
            raise ValueError("need 1 <= D < T")

    @property
    def onset_dates(self) -> list[dt.date]:
        return [self.start_date + dt.timedelta(days=k) for k in range(self.T)]

    @property
    def as_of_date(self) -> dt.date:
        return self.start_date + dt.timedelta(days=self.T - 1)


@dataclass
class SimulationResult:
    line_list: list
    full_counts: np.ndarray      # (N, T) true totals Y
    delay_counts: np.ndarray     # (N, T, D+1) complete reporting triangle
    truth: ModelState
    config: SimulationConfig

    def model_data(self, drop_last_day: bool = True) -> ModelData:
        """The data visible on the last onset day."""
        return ModelData.from_counts(self.delay_counts, self.config.graph,
                                     self.config.start_date, drop_last_day)


def sample_icar(graph: CountyGraph, tau2: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-sum draw from the intrinsic CAR prior via the Laplacian eigenbasis."""
    vals, vecs = np.linalg.eigh(graph.laplacian)
    keep = vals > 1e-9 * max(vals.max(), 1.0)
    z = rng.standard_normal(keep.sum())
    d = vecs[:, keep] @ (z * np.sqrt(tau2 / vals[keep]))
    return d - d.mean()


def county_rng(seed: int, county_id: str) -> np.random.Generator:
    """Stream for one county, keyed by its id so relabelling or reordering
    counties never changes that county's draws."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(county_id.encode()),)))


def draw_parameters(config: SimulationConfig, rng: np.random.Generator) -> dict:
    """Statewide hyperparameters and the spatial effect: fixed values where
    given, prior draws otherwise."""
    prior, fixed = config.prior, config.fixed
    N, D = config.graph.n, config.D
    out = {}

    def pick(name, draw, shape=()):
        # always consume the draw so fixing one value leaves the others unchanged
        value = draw()
        if name in fixed:
            value = np.broadcast_to(np.asarray(fixed[name], dtype=float), shape).copy()
        out[name] = float(value) if shape == () else np.asarray(value, dtype=float).reshape(shape)

    for c in VARIANCE_COMPONENTS:
        a, b = prior.inverse_gamma(c)
        pick(f"tau2_{c}", lambda: b / rng.gamma(a))
    pick("rho_delta", lambda: rng.uniform(prior.rho_low, prior.rho_high))
    pick("rho_psi", lambda: rng.uniform(prior.rho_low, prior.rho_high))
    pick("delta_bar", lambda: rng.normal(0.0, np.sqrt(prior.delta_bar_var)))
    pick("d", lambda: sample_icar(config.graph, out["tau2_d"], rng), (N,))
    if "d" in fixed:
        out["d"] = out["d"] - out["d"].mean()
    pick("eta_bar", lambda: rng.normal(0.0, np.sqrt(prior.eta_bar_var), 6), (6,))
    pick("xi_bar", lambda: rng.normal(0.0, np.sqrt(prior.xi_bar_var), 6), (6,))
    pick("beta", lambda: rng.normal(0.0, np.sqrt(prior.beta_var), D), (D,))
    pick("phi", lambda: rng.gamma(prior.phi_shape, 1.0 / prior.phi_rate, D), (D,))
    return out


def _county_draws(rng, p, fixed, prior, index, level, T):
    """Weekday effects and latent states for one county from its own stream."""
    def pick(name, draw):
        value = np.asarray(draw(), dtype=float)
        if name in fixed:
            pinned = np.asarray(fixed[name], dtype=float)
            if pinned.ndim > value.ndim:          # one entry per county
                pinned = pinned[index]
            value = np.broadcast_to(pinned, value.shape)
        return np.array(value)

    eta = pick("eta", lambda: p["eta_bar"] + rng.normal(0.0, np.sqrt(p["tau2_eta"]), 6))
    xi = pick("xi", lambda: p["xi_bar"] + rng.normal(0.0, np.sqrt(p["tau2_xi"]), 6))
    alpha1 = float(pick("alpha1", lambda: rng.normal(prior.alpha1_mean, np.sqrt(prior.alpha1_var))))

    sd_delta = np.sqrt(p["tau2_delta"])

    def trend():
        path = np.empty(T)
        path[0] = level + sd_delta * rng.standard_normal()
        for t in range(1, T):
            path[t] = level + p["rho_delta"] * (path[t - 1] - level) + sd_delta * rng.standard_normal()
        return path

    delta = pick("delta", trend)
    sd_alpha = np.sqrt(p["tau2_alpha"])
    alpha = np.empty(T)
    alpha[0] = alpha1
    for t in range(1, T):
        alpha[t] = alpha[t - 1] + delta[t - 1] + sd_alpha * rng.standard_normal()
    return eta, xi, delta, alpha


def simulate(config: SimulationConfig) -> SimulationResult:
    """Draw one complete dataset and its ground truth."""
    rng = np.random.default_rng(config.seed)
    graph, T, D = config.graph, config.T, config.D
    N = graph.n
    p = draw_parameters(config, rng)
    fixed = config.fixed
    for name, rank in (("eta", 2), ("xi", 2), ("alpha1", 1), ("delta", 2)):
        if name in fixed and np.ndim(fixed[name]) == rank and np.shape(fixed[name])[0] != N:
            raise ValueError(f"fixed {name} must have one entry per county")

    X = day_of_week_design(config.onset_dates)
    V = report_day_design(config.start_date, T, D)
    level = p["delta_bar"] + p["d"]
    phi = p["phi"]
    eta, xi = np.empty((N, 6)), np.empty((N, 6))
    delta, alpha, psi = np.empty((N, T)), np.empty((N, T)), np.empty((N, T, D))
    Y = np.empty((N, T), dtype=np.int64)
    Z = np.zeros((N, T, D + 1), dtype=np.int64)
    sd_psi = np.sqrt(p["tau2_psi"])
    for i, cid in enumerate(graph.county_ids):
        crng = county_rng(config.seed, cid)
        eta[i], xi[i], delta[i], alpha[i] = _county_draws(
            crng, p, fixed, config.prior, i, level[i], T)
        loglam = graph.offsets[i] + alpha[i] + X @ eta[i]
        Y[i] = crng.poisson(np.exp(loglam))
        mu = p["beta"][None, :] + V @ xi[i]
        psi[i, 0] = mu[0] + sd_psi * crng.standard_normal(D)
        for t in range(1, T):
            psi[i, t] = mu[t] + p["rho_psi"] * (psi[i, t - 1] - mu[t - 1]) + sd_psi * crng.standard_normal(D)
        nu = expit(psi[i])
        # per-cell hazards from the generalized Dirichlet, then sequential binomial splitting
        hazards = crng.beta(nu * phi, (1.0 - nu) * phi)
        remaining = Y[i].copy()
        for d in range(D):
            Z[i, :, d] = crng.binomial(remaining, hazards[:, d])
            remaining -= Z[i, :, d]
        Z[i, :, D] = remaining

    truth = ModelState(
        alpha=alpha, delta=delta, delta_bar=p["delta_bar"], d=p["d"],
        eta=eta, eta_bar=p["eta_bar"], psi=psi, beta=p["beta"],
        xi=xi, xi_bar=p["xi_bar"], rho_delta=p["rho_delta"], rho_psi=p["rho_psi"],
        phi=phi, tau2_alpha=p["tau2_alpha"], tau2_delta=p["tau2_delta"],
        tau2_d=p["tau2_d"], tau2_eta=p["tau2_eta"], tau2_xi=p["tau2_xi"],
        tau2_psi=p["tau2_psi"], Y=Y,
    )
    return SimulationResult(expand_line_list(Z, graph.county_ids, config.start_date), Y, Z, truth, config)


def expand_line_list(Z: np.ndarray, county_ids, start_date: dt.date) -> list:
    """One record per case, ordered by county, onset day and delay."""
    records = []
    N, T, D1 = Z.shape
    days = [start_date + dt.timedelta(days=k) for k in range(T + D1)]
    for i, t, d in zip(*np.nonzero(Z)):
        rec = LineListRecord(county_ids[i], days[t], days[t + d])
        records.extend([rec] * int(Z[i, t, d]))
    return records


def censor(line_list, as_of_date: dt.date) -> list:
    """Records already reported on ``as_of_date``."""
    return [r for r in line_list if r.report_date <= as_of_date]


def expected_delay_proportions(beta, phi=None) -> np.ndarray:
    """Mean delay proportions when every hazard sits at its baseline ``expit(beta)``."""
    return stick_breaking_mean(expit(np.asarray(beta, dtype=float)))

"""
Metropolis-within-Gibbs sampler for the nowcasting model.

Continuous latents get scalar Gaussian random-walk proposals with per-node
adaptive scales (adapted during burn-in only). Nodes that are conditionally
independent given the rest of the state are proposed and accepted together
as arrays: states and hazards alternate between even and odd days, and
county-level effects are vectorized over counties. Each node still receives
its own accept/reject decision, so one sweep is the same transition kernel
as a sequential scan in that order.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, gammaln, logit, pdtr, pdtrc, pdtrik, xlogy

from .model import (
    MAX_ABS_LOG_RATE,
    HyperPriorSpec,
    ModelData,
    ModelState,
    hazard_mean,
    icar_quadratic,
    log_joint,
    psi_residuals,
    trend_residuals,
)

DEFAULT_MONITORS = (
    "delta", "Y", "delta_bar", "beta", "rho_delta", "rho_psi",
    "tau2_alpha", "tau2_delta", "tau2_d", "tau2_eta", "tau2_xi", "tau2_psi",
)
FULL_STATE_MONITORS = ("alpha", "d", "eta_bar", "xi_bar", "phi")
TREND_DAYS = 21

INITIAL_SCALES = {
    "alpha": 0.1, "delta": 0.02, "d": 0.02, "delta_bar": 0.02,
    "eta": 0.1, "eta_bar": 0.1, "psi": 0.3, "beta": 0.2, "xi": 0.1, "xi_bar": 0.1,
    "rho_delta": 0.3, "rho_psi": 0.3, "phi": 0.3,
    "shift_delta_bar": 0.02, "shift_d": 0.02, "shift_beta": 0.1,
    "shift_eta_bar": 0.05, "shift_xi_bar": 0.05,
}


class SamplerError(RuntimeError):
    """Raised when the chain cannot be started from a finite state."""


@dataclass
class SamplerConfig:
    iterations: int = 30000
    burn_in: int = 15000
    thin: int = 10
    chains: int = 2
    seed: int = 0
    adapt_interval: int = 200
    target_acceptance: float = 0.44
    monitors: tuple = DEFAULT_MONITORS
    full_state: bool = False

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1 or self.chains < 1 or self.adapt_interval < 1:
            raise ValueError("thin, chains and adapt_interval must be >= 1")
        self.monitors = tuple(self.monitors)

    @property
    def n_draws(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


def chain_rng(seed: int, chain_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chain_index,)))


# ---------------------------------------------------------------- init

def pooled_hazards(data: ModelData) -> np.ndarray:
    """Statewide empirical conditional reporting probability per delay."""
    N, T, D = data.shape
    mask = data.lik_mask & data.complete[:, None]
    if not mask.any():
        mask = data.lik_mask
    k = data.counts[:, :, :D]
    n = data.partial[:, :, None] - data.cum_before
    num = np.where(mask[None], k, 0).sum(axis=(0, 1))
    den = np.where(mask[None], n, 0).sum(axis=(0, 1))
    return (num + 0.5) / (den + 1.0)


def initialize(data: ModelData, seed: int = 0, prior: HyperPriorSpec | None = None) -> ModelState:
    """Deterministic starting state built from the reported counts."""
    N, T, D = data.shape
    S = data.partial
    pop = np.exp(data.offsets)
    h = pooled_hazards(data)
    psi0 = np.clip(logit(h), -5.0, 5.0)
    # reported fraction at each onset day's observation depth
    depth = T - 1 - np.arange(T)
    reported = 1.0 - np.cumprod(1.0 - h)[np.minimum(depth, D - 1)]
    reported[depth >= D] = 1.0
    c = np.maximum(reported, 0.05)
    Y = np.maximum(S, np.round(S / c[None, :])).astype(np.int64)
    Y[:, data.complete] = S[:, data.complete]
    return ModelState(
        alpha=np.log((S + 1.0) / pop[:, None]),
        delta=np.zeros((N, T)),
        delta_bar=0.0,
        d=np.zeros(N),
        eta=np.zeros((N, 6)),
        eta_bar=np.zeros(6),
        psi=np.broadcast_to(psi0, (N, T, D)).copy(),
        beta=psi0.copy(),
        xi=np.zeros((N, 6)),
        xi_bar=np.zeros(6),
        rho_delta=0.5,
        rho_psi=0.5,
        phi=np.full(D, 10.0),
        tau2_alpha=0.1, tau2_delta=0.1, tau2_d=0.1,
        tau2_eta=0.1, tau2_xi=0.1, tau2_psi=0.1,
        Y=Y,
    )


def recenter_spatial(state: ModelState) -> ModelState:
    state.d = state.d - state.d.mean()
    return state


def draw_inverse_gamma(shape: float, scale: float, rng: np.random.Generator) -> float:
    return scale / rng.gamma(shape)


def variance_posterior(component: str, state: ModelState, data: ModelData,
                       prior: HyperPriorSpec) -> tuple[float, float]:
    """Shape and scale of the conjugate inverse-gamma full conditional."""
    a, b = prior.inverse_gamma(component)
    if component == "alpha":
        r = state.alpha[:, 1:] - state.alpha[:, :-1] - state.delta[:, :-1]
        k, ssr = r.size, float((r * r).sum())
    elif component == "delta":
        r = trend_residuals(state.delta, state.delta_bar + state.d, state.rho_delta)
        k, ssr = r.size, float((r * r).sum())
    elif component == "d":
        k, ssr = len(state.d) - 1, icar_quadratic(state.d, data.edges)
    elif component == "eta":
        r = state.eta - state.eta_bar
        k, ssr = r.size, float((r * r).sum())
    elif component == "xi":
        r = state.xi - state.xi_bar
        k, ssr = r.size, float((r * r).sum())
    elif component == "psi":
        r = psi_residuals(state.psi, hazard_mean(state, data), state.rho_psi)
        k, ssr = r.size, float((r * r).sum())
    else:
        raise KeyError(component)
    return a + 0.5 * k, b + 0.5 * ssr


def update_variance_gibbs(component: str, state: ModelState, data: ModelData,
                          prior: HyperPriorSpec, rng: np.random.Generator) -> float:
    shape, scale = variance_posterior(component, state, data, prior)
    value = draw_inverse_gamma(shape, scale, rng)
    setattr(state, f"tau2_{component}", value)
    return value


def update_scalar_metropolis(value: float, log_target, scale: float,
                             rng: np.random.Generator) -> tuple[float, bool]:
    """One random-walk Metropolis step on an unconstrained scalar."""
    proposal = value + scale * rng.standard_normal()
    logr = log_target(proposal) - log_target(value)
    if np.log(rng.random()) < logr:
        return proposal, True
    return value, False


def truncated_poisson(lam, low, rng: np.random.Generator) -> np.ndarray:
    """Exact draws from Poisson(``lam``) conditioned on being at least ``low``.

    Inverse-CDF sampling; the continuous inverse is snapped to the integer quantile.
    """
    lam = np.asarray(lam, dtype=float)
    low = np.asarray(low, dtype=np.int64)
    below = np.where(low > 0, pdtr(low - 1, lam), 0.0)
    tail = np.where(low > 0, pdtrc(low - 1, lam), 1.0)
    q = below + (1.0 - rng.random(lam.shape)) * tail
    with np.errstate(invalid="ignore"):
        y = np.ceil(pdtrik(np.minimum(q, 1.0), lam))
    y = np.where(np.isfinite(y), y, low).astype(np.int64)
    y = np.maximum(y, low)
    # fix off-by-one from the continuous root
    for _ in range(3):
        down = (y > low) & (pdtr(y - 1, lam) >= q)
        up = pdtr(y, lam) < q
        if not (down.any() or up.any()):
            break
        y = y - down + (up & ~down)
    return np.where(tail > 0, y, low)


def _rho_to_u(rho: float) -> float:
    return float(logit((rho + 1.0) / 2.0))


def _u_to_rho(u):
    return 2.0 * expit(u) - 1.0


def _rho_log_jacobian(u):
    # d rho / d u = 2 s (1 - s), s = expit(u)
    return math.log(2.0) - np.logaddexp(0.0, -u) - np.logaddexp(0.0, u)


def _ar_local(r: np.ndarray, var) -> np.ndarray:
    """Per-node log-density contributions of an AR(1) chain along axis 1.

    ``r`` holds innovations; node t touches innovations t and t + 1.
    """
    q = -0.5 * r * r / var
    out = q.copy()
    out[:, :-1] += q[:, 1:]
    return out


class Sampler:
    """One Markov chain over :class:`ModelState`."""

    def __init__(self, data: ModelData, prior: HyperPriorSpec, config: SamplerConfig,
                 chain_index: int = 0, state: ModelState | None = None):
        self.data = data
        self.prior = prior
        self.config = config
        self.chain_index = chain_index
        self.rng = chain_rng(config.seed, chain_index)
        self.state = state.copy() if state is not None else initialize(data, config.seed, prior)
        s = self.state
        shapes = {
            "alpha": s.alpha.shape, "delta": s.delta.shape, "d": s.d.shape, "delta_bar": (),
            "eta": s.eta.shape, "eta_bar": s.eta_bar.shape, "psi": s.psi.shape,
            "beta": s.beta.shape, "xi": s.xi.shape, "xi_bar": s.xi_bar.shape,
            "rho_delta": (), "rho_psi": (), "phi": s.phi.shape,
            "shift_delta_bar": (), "shift_d": s.d.shape, "shift_beta": s.beta.shape,
            "shift_eta_bar": s.eta_bar.shape, "shift_xi_bar": s.xi_bar.shape,
        }
        self.log_scale = {k: np.full(v, math.log(INITIAL_SCALES[k])) for k, v in shapes.items()}
        # cumulative per-node acceptance counts; snapshots mark interval starts
        self.accepted = {k: np.zeros(v) for k, v in shapes.items()}
        self.accepted["Y"] = np.zeros(())
        self.proposed = {k: 0 for k in self.accepted}
        self._interval_start = {k: v.copy() for k, v in self.accepted.items()}
        self._burn_in_accepted = None
        self._burn_in_proposed = None
        self.iteration = 0
        self._adapt_round = 0
        if (prior.rho_low, prior.rho_high) != (-1.0, 1.0):
            raise NotImplementedError("rho transform assumes a uniform(-1, 1) prior")
        N, T, D = data.shape
        self._k = data.counts[:, :, :D].astype(float)
        self._bb_mask = np.broadcast_to(data.lik_mask[None], (N, T, D))
        self._latent = np.nonzero(~data.complete)[0]
        if data.drop_last_day:
            self._mh_days = self._latent[self._latent < T - 1]
        else:
            self._mh_days = self._latent
        lj = log_joint(self.state, data, prior)
        if not np.isfinite(lj):
            raise SamplerError(f"non-finite log density at the initial state ({lj})")

    # ------------------------------------------------------------ helpers

    def _accept(self, logr) -> np.ndarray:
        logr = np.asarray(logr, dtype=float)
        # NaN compares False, i.e. rejects
        return np.log(self.rng.random(logr.shape)) < logr

    def _propose(self, name: str, current, sel=None):
        scale = np.exp(self.log_scale[name] if sel is None else self.log_scale[name][sel])
        cur = current if sel is None else current[sel]
        return cur + scale * self.rng.standard_normal(np.shape(cur))

    def _remaining(self):
        return self.state.Y[:, :, None] - self.data.cum_before

    def _bb_local(self, psi, phi, n, with_phi=False):
        """Delay terms that vary with the hazards.

        Drops the binomial coefficient (fixed while Y is fixed) and, unless
        ``with_phi``, the factors depending on the dispersion alone.
        """
        nu = expit(psi)
        a = nu * phi
        b = phi - a
        k = self._k
        out = gammaln(k + a) + gammaln(n - k + b) - gammaln(a) - gammaln(b)
        if with_phi:
            out += gammaln(phi) - gammaln(n + phi)
        return np.where(self._bb_mask, out, 0.0)

    # ------------------------------------------------------------ blocks

    def _update_alpha(self):
        s, data, prior = self.state, self.data, self.prior
        base = data.offsets[:, None] + s.eta @ data.X.T
        v0 = prior.alpha1_var
        m0 = prior.alpha1_mean

        def local(alpha):
            loglam = base + alpha
            pois = s.Y * loglam - np.exp(np.minimum(loglam, MAX_ABS_LOG_RATE))
            pois = np.where(np.abs(loglam) < MAX_ABS_LOG_RATE, pois, -np.inf)
            r = np.empty_like(alpha)
            r[:, 0] = 0.0
            r[:, 1:] = alpha[:, 1:] - alpha[:, :-1] - s.delta[:, :-1]
            out = pois + _ar_local(r, s.tau2_alpha)
            out[:, 0] += -0.5 * (alpha[:, 0] - m0) ** 2 / v0
            return out

        self._checkerboard("alpha", "alpha", local)

    def _update_delta(self):
        s = self.state
        level = s.delta_bar + s.d

        def local(delta):
            r = trend_residuals(delta, level, s.rho_delta)
            out = _ar_local(r, s.tau2_delta)
            ra = s.alpha[:, 1:] - s.alpha[:, :-1] - delta[:, :-1]
            out[:, :-1] += -0.5 * ra * ra / s.tau2_alpha
            return out

        self._checkerboard("delta", "delta", local)

    def _update_psi(self):
        s = self.state
        mu = hazard_mean(s, self.data)
        n = self._remaining()

        def local(psi):
            r = psi_residuals(psi, mu, s.rho_psi)
            return _ar_local(r, s.tau2_psi) + self._bb_local(psi, s.phi, n)

        self._checkerboard("psi", "psi", local)

    def _checkerboard(self, name, attr, local):
        x = getattr(self.state, attr)
        for parity in (0, 1):
            sel = (slice(None), slice(parity, None, 2))
            prop = x.copy()
            prop[sel] = self._propose(name, x, sel)
            cur = local(x)[sel]
            new = local(prop)[sel]
            acc = self._accept(new - cur)
            x[sel] = np.where(acc, prop[sel], x[sel])
            self.accepted[name][sel] += acc
        self.proposed[name] += 1

    def _delta_block_sum(self, delta_bar, d):
        s = self.state
        r = trend_residuals(s.delta, delta_bar + d, s.rho_delta)
        return -0.5 * float((r * r).sum()) / s.tau2_delta

    def _update_d(self):
        s = self.state
        N = len(s.d)
        if N < 2:
            return
        edges = self.data.edges
        scales = np.exp(self.log_scale["d"])

        def target(d):
            return self._delta_block_sum(s.delta_bar, d) - 0.5 * icar_quadratic(d, edges) / s.tau2_d

        for i in range(N):
            step = scales[i] * self.rng.standard_normal()
            # move node i and recenter, so the proposal stays on the sum-to-zero plane
            prop = s.d - step / N
            prop[i] += step
            if np.log(self.rng.random()) < target(prop) - target(s.d):
                s.d = prop
                self.accepted["d"][i] += 1
        recenter_spatial(s)
        self.proposed["d"] += 1

    def _update_delta_bar(self):
        s = self.state
        v = self.prior.delta_bar_var

        def target(x):
            return self._delta_block_sum(x, s.d) - 0.5 * x * x / v

        s.delta_bar, acc = update_scalar_metropolis(
            s.delta_bar, target, float(np.exp(self.log_scale["delta_bar"])), self.rng)
        self.accepted["delta_bar"] += acc
        self.proposed["delta_bar"] += 1

    def _update_eta(self):
        s, data = self.state, self.data
        for k in range(6):
            loglam = data.offsets[:, None] + s.alpha + s.eta @ data.X.T

            def local(col):
                ll = loglam + (col - s.eta[:, k])[:, None] * data.X[None, :, k]
                pois = s.Y * ll - np.exp(np.minimum(ll, MAX_ABS_LOG_RATE))
                pois = np.where(np.abs(ll) < MAX_ABS_LOG_RATE, pois, -np.inf).sum(axis=1)
                return pois - 0.5 * (col - s.eta_bar[k]) ** 2 / s.tau2_eta

            sel = (slice(None), k)
            prop = self._propose("eta", s.eta, sel)
            acc = self._accept(local(prop) - local(s.eta[:, k]))
            s.eta[:, k] = np.where(acc, prop, s.eta[:, k])
            self.accepted["eta"][sel] += acc
        self.proposed["eta"] += 1

    def _update_group_mean(self, name, effects, tau2, prior_var):
        s = self.state
        cur = getattr(s, name)

        def local(m):
            return -0.5 * ((effects - m) ** 2).sum(axis=0) / tau2 - 0.5 * m * m / prior_var

        prop = self._propose(name, cur)
        acc = self._accept(local(prop) - local(cur))
        setattr(s, name, np.where(acc, prop, cur))
        self.accepted[name] += acc
        self.proposed[name] += 1

    def _psi_prior_sum(self, mu, axis):
        s = self.state
        r = psi_residuals(s.psi, mu, s.rho_psi)
        return -0.5 * (r * r).sum(axis=axis) / s.tau2_psi

    def _update_beta(self):
        s, data = self.state, self.data
        vxi = np.einsum("tdk,ik->itd", data.V, s.xi)

        def local(beta):
            return self._psi_prior_sum(beta[None, None, :] + vxi, (0, 1)) - 0.5 * beta ** 2 / self.prior.beta_var

        prop = self._propose("beta", s.beta)
        acc = self._accept(local(prop) - local(s.beta))
        s.beta = np.where(acc, prop, s.beta)
        self.accepted["beta"] += acc
        self.proposed["beta"] += 1

    def _update_xi(self):
        s, data = self.state, self.data
        for k in range(6):
            mu = hazard_mean(s, data)

            def local(col):
                m = mu + (col - s.xi[:, k])[:, None, None] * data.V[None, :, :, k]
                return self._psi_prior_sum(m, (1, 2)) - 0.5 * (col - s.xi_bar[k]) ** 2 / s.tau2_xi

            sel = (slice(None), k)
            prop = self._propose("xi", s.xi, sel)
            acc = self._accept(local(prop) - local(s.xi[:, k]))
            s.xi[:, k] = np.where(acc, prop, s.xi[:, k])
            self.accepted["xi"][sel] += acc
        self.proposed["xi"] += 1

    def _update_rho(self, name):
        s, data = self.state, self.data
        if name == "rho_delta":
            level = s.delta_bar + s.d

            def block(rho):
                r = trend_residuals(s.delta, level, rho)
                return -0.5 * float((r * r).sum()) / s.tau2_delta
        else:
            mu = hazard_mean(s, data)

            def block(rho):
                r = psi_residuals(s.psi, mu, rho)
                return -0.5 * float((r * r).sum()) / s.tau2_psi

        def target(u):
            return block(_u_to_rho(u)) + _rho_log_jacobian(u)

        u, acc = update_scalar_metropolis(
            _rho_to_u(getattr(s, name)), target, float(np.exp(self.log_scale[name])), self.rng)
        if acc:
            setattr(s, name, float(_u_to_rho(u)))
        self.accepted[name] += acc
        self.proposed[name] += 1

    def _update_phi(self):
        s = self.state
        n = self._remaining()
        a, r = self.prior.phi_shape, self.prior.phi_rate

        def local(logphi):
            phi = np.exp(logphi)
            lik = self._bb_local(s.psi, phi[None, None, :], n, with_phi=True).sum(axis=(0, 1))
            # Gamma prior on phi plus the log-scale Jacobian
            return lik + a * logphi - r * phi

        cur = np.log(s.phi)
        prop = self._propose("phi", cur)
        acc = self._accept(local(prop) - local(cur))
        s.phi = np.exp(np.where(acc, prop, cur))
        self.accepted["phi"] += acc
        self.proposed["phi"] += 1

    # ------------------------------------------------------------ location shifts
    #
    # Each move translates a location parameter together with everything
    # centred on it, so the Gaussian innovations are unchanged and only the
    # likelihood and the top-level prior enter the ratio. The translations are
    # volume preserving with symmetric proposals.

    def _poisson_sum(self, alpha, eta, axis=None):
        s, data = self.state, self.data
        loglam = data.offsets[:, None] + alpha + eta @ data.X.T
        pois = s.Y * loglam - np.exp(np.minimum(loglam, MAX_ABS_LOG_RATE))
        pois = np.where(np.abs(loglam) < MAX_ABS_LOG_RATE, pois, -np.inf)
        return pois.sum(axis=axis)

    def _shift_trend(self):
        s = self.state
        N, T, _ = self.data.shape
        ramp = np.arange(T, dtype=float)
        v = self.prior.delta_bar_var
        # statewide: delta_bar, every delta and the slope of every alpha path
        eps = float(np.exp(self.log_scale["shift_delta_bar"])) * self.rng.standard_normal()
        alpha = s.alpha + eps * ramp
        logr = (self._poisson_sum(alpha, s.eta) - self._poisson_sum(s.alpha, s.eta)
                - 0.5 * ((s.delta_bar + eps) ** 2 - s.delta_bar ** 2) / v)
        if np.log(self.rng.random()) < logr:
            s.delta_bar += eps
            s.delta = s.delta + eps
            s.alpha = alpha
            self.accepted["shift_delta_bar"] += 1
        self.proposed["shift_delta_bar"] += 1
        if N < 2:
            return
        # county-level: move one county's trend level on the sum-to-zero plane
        edges = self.data.edges
        scales = np.exp(self.log_scale["shift_d"])
        cur_pois = self._poisson_sum(s.alpha, s.eta)
        cur_icar = -0.5 * icar_quadratic(s.d, edges) / s.tau2_d
        for i in range(N):
            step = scales[i] * self.rng.standard_normal()
            shift = np.full(N, -step / N)
            shift[i] += step
            d = s.d + shift
            alpha = s.alpha + shift[:, None] * ramp
            new_pois = self._poisson_sum(alpha, s.eta)
            new_icar = -0.5 * icar_quadratic(d, edges) / s.tau2_d
            if np.log(self.rng.random()) < new_pois - cur_pois + new_icar - cur_icar:
                s.d = d
                s.delta = s.delta + shift[:, None]
                s.alpha = alpha
                cur_pois, cur_icar = new_pois, new_icar
                self.accepted["shift_d"][i] += 1
        self.proposed["shift_d"] += 1

    def _shift_beta(self):
        s = self.state
        n = self._remaining()
        eps = np.exp(self.log_scale["shift_beta"]) * self.rng.standard_normal(s.beta.shape)
        psi = s.psi + eps
        logr = (self._bb_local(psi, s.phi, n).sum(axis=(0, 1))
                - self._bb_local(s.psi, s.phi, n).sum(axis=(0, 1))
                - 0.5 * ((s.beta + eps) ** 2 - s.beta ** 2) / self.prior.beta_var)
        acc = self._accept(logr)
        s.beta = np.where(acc, s.beta + eps, s.beta)
        s.psi = np.where(acc, psi, s.psi)
        self.accepted["shift_beta"] += acc
        self.proposed["shift_beta"] += 1

    def _shift_weekday(self):
        s, data = self.state, self.data
        scales = np.exp(self.log_scale["shift_eta_bar"])
        cur = self._poisson_sum(s.alpha, s.eta)
        for k in range(6):
            eps = scales[k] * self.rng.standard_normal()
            eta = s.eta.copy()
            eta[:, k] += eps
            new = self._poisson_sum(s.alpha, eta)
            logr = new - cur - 0.5 * ((s.eta_bar[k] + eps) ** 2 - s.eta_bar[k] ** 2) / self.prior.eta_bar_var
            if np.log(self.rng.random()) < logr:
                s.eta = eta
                s.eta_bar[k] += eps
                cur = new
                self.accepted["shift_eta_bar"][k] += 1
        n = self._remaining()
        scales = np.exp(self.log_scale["shift_xi_bar"])
        cur = self._bb_local(s.psi, s.phi, n).sum()
        for k in range(6):
            eps = scales[k] * self.rng.standard_normal()
            psi = s.psi + eps * data.V[None, :, :, k]
            new = self._bb_local(psi, s.phi, n).sum()
            logr = new - cur - 0.5 * ((s.xi_bar[k] + eps) ** 2 - s.xi_bar[k] ** 2) / self.prior.xi_bar_var
            if np.log(self.rng.random()) < logr:
                s.psi = psi
                s.xi[:, k] += eps
                s.xi_bar[k] += eps
                cur = new
                self.accepted["shift_xi_bar"][k] += 1
        self.proposed["shift_eta_bar"] += 1
        self.proposed["shift_xi_bar"] += 1

    def update_latent_totals(self):
        """Refresh the unreported totals ``Y`` for incomplete onset days."""
        s, data = self.state, self.data
        N, T, D = data.shape
        loglam = data.offsets[:, None] + s.alpha + s.eta @ data.X.T
        days = self._mh_days
        if len(days):
            S = data.partial[:, days]
            lam = np.exp(np.minimum(loglam[:, days], MAX_ABS_LOG_RATE))
            nu = expit(s.psi[:, days])
            mask = self._bb_mask[:, days]
            unreported = np.where(mask, 1.0 - nu, 1.0).prod(axis=2)
            rate = lam * unreported
            cur = s.Y[:, days]
            prop = S + self.rng.poisson(rate)
            a = nu * s.phi
            b = (1.0 - nu) * s.phi
            k = self._k[:, days]
            cb = data.cum_before[:, days]

            def log_target(Y):
                n = Y[:, :, None] - cb
                bb = (gammaln(n + 1) - gammaln(n - k + 1) + gammaln(k + a) + gammaln(n - k + b)
                      - gammaln(n + a + b))
                bb = np.where(mask, bb, 0.0).sum(axis=2)
                return Y * loglam[:, days] - gammaln(Y + 1.0) + bb

            def log_q(Y):
                R = Y - S
                return xlogy(R, rate) - gammaln(R + 1.0)

            logr = log_target(prop) - log_target(cur) - log_q(prop) + log_q(cur)
            acc = self._accept(logr)
            s.Y[:, days] = np.where(acc, prop, cur)
            self.accepted["Y"] += float(acc.mean())
            self.proposed["Y"] += 1
        if data.drop_last_day:
            # last onset day: exact draw from the Poisson truncated at the reported count
            t = T - 1
            lam = np.exp(np.minimum(loglam[:, t], MAX_ABS_LOG_RATE))
            S = data.partial[:, t]
            s.Y[:, t] = truncated_poisson(lam, S, self.rng)

    # ------------------------------------------------------------ sweep

    def sweep(self):
        s = self.state
        self._update_alpha()
        self._update_delta()
        self._update_d()
        self._update_delta_bar()
        self._update_eta()
        self._update_group_mean("eta_bar", s.eta, s.tau2_eta, self.prior.eta_bar_var)
        self._update_psi()
        self._update_beta()
        self._update_xi()
        self._update_group_mean("xi_bar", s.xi, s.tau2_xi, self.prior.xi_bar_var)
        self._update_rho("rho_delta")
        self._update_rho("rho_psi")
        self._update_phi()
        self._shift_trend()
        self._shift_beta()
        self._shift_weekday()
        for c in ("alpha", "delta", "d", "eta", "xi", "psi"):
            update_variance_gibbs(c, s, self.data, self.prior, self.rng)
        self.update_latent_totals()
        self.iteration += 1
        cfg = self.config
        if self.iteration <= cfg.burn_in and self.iteration % cfg.adapt_interval == 0:
            self._adapt()
        if self.iteration == cfg.burn_in:
            self._burn_in_accepted = {k: v.copy() for k, v in self.accepted.items()}
            self._burn_in_proposed = dict(self.proposed)

    def _adapt(self):
        self._adapt_round += 1
        gain = 2.0 / math.sqrt(self._adapt_round)
        interval = self.config.adapt_interval
        for name, scale in self.log_scale.items():
            rate = (self.accepted[name] - self._interval_start[name]) / interval
            self.log_scale[name] = scale + gain * (rate - self.config.target_acceptance)
        self._interval_start = {k: v.copy() for k, v in self.accepted.items()}

    def acceptance_rates(self) -> dict:
        """Mean acceptance rate per node family, post burn-in when available."""
        acc0 = self._burn_in_accepted or {k: 0.0 for k in self.accepted}
        n0 = self._burn_in_proposed or {k: 0 for k in self.proposed}
        out = {}
        for name, acc in self.accepted.items():
            n = self.proposed[name] - n0[name]
            out[name] = float(np.mean(acc - acc0[name])) / n if n else float("nan")
        return out

    def scales(self) -> dict:
        return {k: np.exp(v).copy() for k, v in self.log_scale.items()}


# ---------------------------------------------------------------- draws

def monitored_values(state: ModelState, data: ModelData, names) -> dict:
    N, T, D = data.shape
    out = {}
    for name in names:
        if name == "delta":
            out[name] = state.delta[:, max(0, T - TREND_DAYS):].copy()
        elif name == "Y":
            out[name] = state.Y[:, ~data.complete].copy()
        elif name == "alpha":
            out[name] = state.alpha.copy()
        else:
            value = getattr(state, name)
            out[name] = np.array(value, dtype=float, copy=True)
    return out


@dataclass
class PosteriorDraws:
    """Retained draws, each array shaped ``(chains, draws, ...)``."""

    samples: dict
    county_ids: tuple
    trend_dates: tuple
    nowcast_dates: tuple
    partial: np.ndarray                  # reported-so-far counts for the nowcast days
    config: Optional[SamplerConfig] = None
    acceptance: list = field(default_factory=list)
    runtime_seconds: list = field(default_factory=list)
    # proposal scales at the end of burn-in and at the last iteration, per chain
    scales_burn_in: list = field(default_factory=list)
    scales_final: list = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return next(iter(self.samples.values())).shape[0]

    @property
    def n_draws(self) -> int:
        return next(iter(self.samples.values())).shape[1]

    def pooled(self, name: str) -> np.ndarray:
        x = self.samples[name]
        return x.reshape((-1,) + x.shape[2:])

    @classmethod
    def combine(cls, parts: list) -> PosteriorDraws:
        first = parts[0]
        samples = {k: np.concatenate([p.samples[k] for p in parts], axis=0) for k in first.samples}
        return cls(
            samples, first.county_ids, first.trend_dates, first.nowcast_dates, first.partial,
            first.config,
            acceptance=[a for p in parts for a in p.acceptance],
            runtime_seconds=[r for p in parts for r in p.runtime_seconds],
            scales_burn_in=[a for p in parts for a in p.scales_burn_in],
            scales_final=[a for p in parts for a in p.scales_final],
        )


def run_chain(data: ModelData, config: SamplerConfig, chain_index: int = 0,
              prior: HyperPriorSpec | None = None, init: ModelState | None = None,
              callback=None) -> PosteriorDraws:
    """Run one chain and keep every ``thin``-th post-burn-in draw."""
    prior = prior or HyperPriorSpec()
    if config.n_draws < 1:
        raise ValueError("configuration retains no draws; check iterations, burn_in and thin")
    start = time.perf_counter()
    sampler = Sampler(data, prior, config, chain_index, init)
    names = list(config.monitors) + (list(FULL_STATE_MONITORS) if config.full_state else [])
    names = list(dict.fromkeys(names))
    kept = {name: [] for name in names}
    scales_burn_in = sampler.scales() if config.burn_in == 0 else None
    for it in range(1, config.iterations + 1):
        sampler.sweep()
        if it == config.burn_in:
            scales_burn_in = sampler.scales()
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            for name, value in monitored_values(sampler.state, data, names).items():
                kept[name].append(value)
        if callback is not None:
            callback(sampler)
    samples = {name: np.stack(v)[None] for name, v in kept.items()}
    N, T, D = data.shape
    dates = tuple(data.onset_dates) if data.onset_dates else tuple(range(T))
    return PosteriorDraws(
        samples=samples,
        county_ids=tuple(data.county_ids) or tuple(str(i) for i in range(N)),
        trend_dates=dates[max(0, T - TREND_DAYS):],
        nowcast_dates=tuple(d for d, c in zip(dates, data.complete) if not c),
        partial=data.partial[:, ~data.complete].copy(),
        config=config,
        acceptance=[sampler.acceptance_rates()],
        runtime_seconds=[time.perf_counter() - start],
        scales_burn_in=[scales_burn_in],
        scales_final=[sampler.scales()],
    )


def _run_chain_args(args):
    return run_chain(*args)


def run_chains(data: ModelData, config: SamplerConfig, prior: HyperPriorSpec | None = None,
               threads: int = 1) -> PosteriorDraws:
    """Run ``config.chains`` independent chains, optionally in worker processes."""
    jobs = [(data, config, k, prior) for k in range(config.chains)]
    if threads > 1 and config.chains > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(threads, config.chains)) as pool:
            parts = list(pool.map(_run_chain_args, jobs))
    else:
        parts = [run_chain(*job) for job in jobs]
    return PosteriorDraws.combine(parts)

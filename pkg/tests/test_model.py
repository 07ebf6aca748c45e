import math

import mpmath
import numpy as np
import pytest

from nowcast.data import rook_grid
from nowcast.model import (
    HyperPriorSpec,
    InvalidStateError,
    DivergentStateError,
    alpha_terms,
    betabinom_logpmf,
    block_log_densities,
    delta_terms,
    hierarchical_terms,
    inverse_gamma_logpdf,
    log_delay_likelihood,
    log_icar_prior,
    log_joint,
    log_poisson_outcome,
    psi_terms,
    stick_breaking_mean,
)
from helpers import pair_graph, random_data, random_state
from oracles import straight_line_log_joint


def mp_betabinom(k, n, a, b):
    mpmath.mp.dps = 40
    a, b = mpmath.mpf(a), mpmath.mpf(b)
    return float(mpmath.log(mpmath.binomial(n, k) * mpmath.beta(k + a, n - k + b) / mpmath.beta(a, b)))


@pytest.mark.parametrize("k, n, a, b", [
    (0, 0, 1.0, 1.0), (3, 10, 0.5, 2.0), (10, 10, 3.3, 0.7), (7, 40, 20.0, 80.0), (1, 2, 1e-3, 5.0),
])
def test_betabinom_matches_mpmath(k, n, a, b):
    assert betabinom_logpmf(k, n, a, b) == pytest.approx(mp_betabinom(k, n, a, b), rel=1e-12, abs=1e-12)


def test_betabinom_sums_to_one():
    for n in range(51):
        for a, b in ((0.3, 0.7), (2.0, 5.0), (1.0 / 3.0 * 12, 2.0 / 3.0 * 12)):
            total = math.fsum(np.exp(betabinom_logpmf(np.arange(n + 1), n, a, b)))
            assert abs(total - 1.0) < 1e-10


def test_betabinom_mean_matches_enumeration():
    # P = 1/3 with dispersion 9: mean must be n * P
    n, a, b = 12, 3.0, 6.0
    k = np.arange(n + 1)
    p = np.exp(betabinom_logpmf(k, n, a, b))
    assert math.fsum(k * p) == pytest.approx(n / 3.0, rel=1e-12)


def test_stick_breaking():
    rng = np.random.default_rng(0)
    for _ in range(50):
        nu = rng.uniform(0, 1, rng.integers(1, 40))
        p = stick_breaking_mean(nu)
        assert len(p) == len(nu) + 1
        assert abs(math.fsum(p) - 1.0) < 1e-12
        assert (p >= 0).all()
    np.testing.assert_allclose(stick_breaking_mean([0.5, 0.5]), [0.5, 0.25, 0.25])
    np.testing.assert_allclose(stick_breaking_mean([1.0, 0.3]), [1.0, 0.0, 0.0])


def test_inverse_gamma_logpdf_matches_mpmath():
    mpmath.mp.dps = 30
    x, a, b = 0.7, 0.5, 0.5
    expect = float(mpmath.log(b ** a / mpmath.gamma(a) * x ** (-a - 1) * mpmath.exp(-b / x)))
    assert inverse_gamma_logpdf(x, a, b) == pytest.approx(expect, rel=1e-13)
    assert inverse_gamma_logpdf(0.0, a, b) == -np.inf


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("drop_last_day", [True, False])
def test_log_joint_matches_straight_line_oracle(seed, drop_last_day):
    rng = np.random.default_rng(seed)
    g = pair_graph()
    data = random_data(rng, g, T=4, D=2, drop_last_day=drop_last_day)
    state = random_state(rng, data)
    prior = HyperPriorSpec()
    expect = straight_line_log_joint(state, data.counts, data.offsets, data.adjacency,
                                     data.X, data.V, prior, drop_last_day)
    assert abs(log_joint(state, data, prior) - expect) < 1e-10


def test_log_joint_oracle_on_grid():
    rng = np.random.default_rng(21)
    g = rook_grid(2, 2, population=[30, 40, 50, 60])
    data = random_data(rng, g, T=6, D=3)
    state = random_state(rng, data)
    prior = HyperPriorSpec(ig_overrides={"d": (2.0, 0.1)}, phi_shape=2.0, phi_rate=0.3)
    expect = straight_line_log_joint(state, data.counts, data.offsets, data.adjacency,
                                     data.X, data.V, prior)
    assert abs(log_joint(state, data, prior) - expect) < 1e-10


def test_blocks_sum_to_joint():
    rng = np.random.default_rng(5)
    data = random_data(rng, pair_graph(), T=5, D=2)
    state = random_state(rng, data)
    prior = HyperPriorSpec()
    blocks = block_log_densities(state, data, prior)
    assert math.fsum(blocks.values()) == pytest.approx(log_joint(state, data, prior), abs=1e-9)


def test_log_joint_rejects_invalid_totals():
    rng = np.random.default_rng(1)
    data = random_data(rng, pair_graph(), T=4, D=2)
    state = random_state(rng, data)
    prior = HyperPriorSpec()
    bad = state.copy()
    bad.Y[0, -1] = data.partial[0, -1] - 1
    assert log_joint(bad, data, prior) == -np.inf
    bad = state.copy()
    bad.Y[0, 0] = data.partial[0, 0] + 1
    assert log_joint(bad, data, prior) == -np.inf
    bad = state.copy()
    bad.rho_delta = 1.0
    assert log_joint(bad, data, prior) == -np.inf


def test_delay_likelihood_raises_when_total_too_small():
    rng = np.random.default_rng(2)
    data = random_data(rng, pair_graph(), T=4, D=2, drop_last_day=False)
    state = random_state(rng, data)
    t = int(np.argmax(data.counts[0, :3, 0]))
    assert data.counts[0, t, 0] > 0
    state.Y[0, t] = data.counts[0, t, 0] - 1
    with pytest.raises(InvalidStateError):
        log_delay_likelihood(0, t, state, data)


def test_divergent_rate_guard():
    rng = np.random.default_rng(3)
    data = random_data(rng, pair_graph(), T=4, D=2)
    state = random_state(rng, data)
    state.alpha[0, 1] = 60.0
    with pytest.raises(DivergentStateError):
        log_poisson_outcome(0, 1, state, data)
    assert log_joint(state, data, HyperPriorSpec()) == -np.inf


def test_icar_normalization_and_translation_invariance():
    g = rook_grid(1, 3)
    d = np.array([-1.0, 0.0, 1.0])
    assert log_icar_prior(d, g, 2.0) == pytest.approx(-0.5 * 2.0 / 2.0)
    assert log_icar_prior(d + 5.0, g, 2.0) == pytest.approx(log_icar_prior(d, g, 2.0))
    norm = log_icar_prior(d, g, 2.0, normalized=True)
    assert norm == pytest.approx(-0.5 - (2 / 2) * math.log(2 * math.pi * 2.0))


# ---- finite-difference gradients of the Gaussian blocks

def _fd_check(f, analytic, x, h=1e-5):
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        fd = (up - down) / (2 * h)
        a = analytic[idx]
        assert abs(fd - a) <= 1e-6 * max(1.0, abs(a)), (idx, fd, a)


def test_gaussian_block_gradients():
    rng = np.random.default_rng(9)
    g = rook_grid(1, 3, population=[20, 30, 40])
    data = random_data(rng, g, T=5, D=2)
    s = random_state(rng, data)
    prior = HyperPriorSpec()

    # latent level: random walk with drift
    a, dl, ta = s.alpha, s.delta, s.tau2_alpha
    r = a[:, 1:] - a[:, :-1] - dl[:, :-1]
    grad = np.zeros_like(a)
    grad[:, 0] = -(a[:, 0] - prior.alpha1_mean) / prior.alpha1_var
    grad[:, 1:] -= r / ta
    grad[:, :-1] += r / ta
    _fd_check(lambda: alpha_terms(s, prior).sum(), grad, s.alpha)

    # trend: AR(1) around the county level
    rho, td = s.rho_delta, s.tau2_delta
    c = s.delta - (s.delta_bar + s.d)[:, None]
    e = np.empty_like(c)
    e[:, 0] = c[:, 0]
    e[:, 1:] = c[:, 1:] - rho * c[:, :-1]
    grad = -e / td
    grad[:, :-1] += rho * e[:, 1:] / td
    _fd_check(lambda: delta_terms(s).sum(), grad, s.delta)
    grad_d = (e[:, 0] + (1 - rho) * e[:, 1:].sum(axis=1)) / td
    _fd_check(lambda: delta_terms(s).sum(), grad_d, s.d)

    # spatial effect
    W = data.adjacency
    grad_icar = -(W.sum(axis=1) * s.d - W @ s.d) / s.tau2_d
    _fd_check(lambda: log_icar_prior(s.d, data, s.tau2_d, normalized=True), grad_icar, s.d)

    # logit hazards
    rp, tp = s.rho_psi, s.tau2_psi
    mu = s.beta[None, None, :] + np.einsum("tdk,ik->itd", data.V, s.xi)
    c = s.psi - mu
    e = np.empty_like(c)
    e[:, 0] = c[:, 0]
    e[:, 1:] = c[:, 1:] - rp * c[:, :-1]
    grad = -e / tp
    grad[:, :-1] += rp * e[:, 1:] / tp
    _fd_check(lambda: psi_terms(s, data).sum(), grad, s.psi)
    _fd_check(lambda: psi_terms(s, data).sum(), -grad.sum(axis=(0, 1)), s.beta)

    # hierarchical weekday effects
    grad_eta = -(s.eta - s.eta_bar[None]) / s.tau2_eta
    _fd_check(lambda: hierarchical_terms(s, prior), grad_eta, s.eta)
    grad_bar = (s.eta - s.eta_bar[None]).sum(axis=0) / s.tau2_eta - s.eta_bar / prior.eta_bar_var
    _fd_check(lambda: hierarchical_terms(s, prior), grad_bar, s.eta_bar)
    grad_xi = -(s.xi - s.xi_bar[None]) / s.tau2_xi
    _fd_check(lambda: hierarchical_terms(s, prior), grad_xi, s.xi)

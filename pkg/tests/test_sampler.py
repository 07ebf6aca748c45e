import datetime as dt
import math

import numpy as np
import pytest
from scipy import stats

from nowcast.data import load_graph, rook_grid
from nowcast.diagnostics import effective_sample_size
from nowcast.model import HyperPriorSpec, ModelData, log_joint
from nowcast.sampler import (
    PosteriorDraws,
    Sampler,
    SamplerConfig,
    SamplerError,
    draw_inverse_gamma,
    initialize,
    recenter_spatial,
    run_chain,
    run_chains,
    truncated_poisson,
    update_scalar_metropolis,
    update_variance_gibbs,
    variance_posterior,
)
from nowcast.simulate import SimulationConfig, desk_scenario, simulate
from helpers import START, pair_graph, random_data, random_state


def tiny_data(seed=0, drop_last_day=True):
    g = pair_graph()
    sim = simulate(SimulationConfig(g, T=12, D=3, fixed=desk_scenario(3), seed=seed))
    return sim.model_data(drop_last_day)


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(iterations=10, burn_in=10)
    with pytest.raises(ValueError):
        SamplerConfig(iterations=10, burn_in=2, thin=0)
    assert SamplerConfig().n_draws == 1500


def test_initialize_on_zero_data():
    g = pair_graph(population=40)
    data = ModelData.from_counts(np.zeros((2, 10, 4), dtype=np.int64), g, START)
    s = initialize(data)
    np.testing.assert_allclose(s.alpha, np.log(1.0 / 40))
    assert (s.Y == 0).all()
    assert (s.delta == 0).all() and (s.d == 0).all() and (s.eta == 0).all()
    assert np.abs(s.psi).max() <= 5.0


def test_initialize_respects_reported_counts():
    rng = np.random.default_rng(0)
    for k in range(5):
        data = random_data(rng, rook_grid(2, 2), T=15, D=4)
        s = initialize(data)
        assert (s.Y >= data.partial).all()
        np.testing.assert_array_equal(s.Y[:, data.complete], data.partial[:, data.complete])
        assert np.isfinite(log_joint(s, data, HyperPriorSpec()))


def test_recenter():
    class S:
        d = np.array([1.0, 2.0, 3.0])
    s = recenter_spatial(S())
    np.testing.assert_allclose(s.d, [-1.0, 0.0, 1.0])
    before = np.subtract.outer(s.d, s.d)
    recenter_spatial(s)
    np.testing.assert_allclose(np.subtract.outer(s.d, s.d), before)


def test_scalar_metropolis_standard_normal():
    rng = np.random.default_rng(1)
    x, out = 0.0, np.empty(50000)
    for k in range(len(out)):
        x, _ = update_scalar_metropolis(x, lambda v: -0.5 * v * v, 2.4, rng)
        out[k] = x
    ess = effective_sample_size(out[None])
    assert abs(out.mean()) < 3 * math.sqrt(1.0 / ess)
    # sd of the sample variance of a normal is about sqrt(2 / ess)
    assert abs(out.var() - 1.0) < 3 * math.sqrt(2.0 / ess)


def test_scalar_metropolis_zero_step_always_accepts():
    rng = np.random.default_rng(2)
    for _ in range(20):
        _, ok = update_scalar_metropolis(0.3, lambda v: -1e3 * v * v, 0.0, rng)
        assert ok


def test_inverse_gamma_draw_moments():
    rng = np.random.default_rng(3)
    shape, scale = 6.0, 2.5
    x = np.array([draw_inverse_gamma(shape, scale, rng) for _ in range(100000)])
    assert x.mean() == pytest.approx(scale / (shape - 1), rel=0.01)


def test_variance_posterior_counts_and_icar_rank():
    rng = np.random.default_rng(4)
    g = rook_grid(2, 2, population=[30, 40, 50, 60])
    data = random_data(rng, g, T=6, D=2)
    s = random_state(rng, data)
    prior = HyperPriorSpec()
    shape, scale = variance_posterior("d", s, data, prior)
    assert shape == 0.5 + 0.5 * 3
    W = data.adjacency
    ssr = sum(W[i, j] * (s.d[i] - s.d[j]) ** 2 for i in range(4) for j in range(i + 1, 4))
    assert scale == pytest.approx(0.5 + 0.5 * ssr)
    shape, scale = variance_posterior("alpha", s, data, prior)
    r = s.alpha[:, 1:] - s.alpha[:, :-1] - s.delta[:, :-1]
    assert shape == 0.5 + 0.5 * r.size
    assert scale == pytest.approx(0.5 + 0.5 * (r ** 2).sum())
    with pytest.raises(KeyError):
        variance_posterior("nope", s, data, prior)


def test_variance_gibbs_shrinks_with_zero_residuals():
    rng = np.random.default_rng(5)
    data = random_data(rng, pair_graph(), T=6, D=2)
    s = random_state(rng, data)
    s.eta[:] = s.eta_bar
    draws = [update_variance_gibbs("eta", s, data, HyperPriorSpec(), rng) for _ in range(2000)]
    # posterior IG(6.5, 0.5) has mean 0.5 / 5.5
    assert np.mean(draws) == pytest.approx(0.5 / 5.5, rel=0.05)


def test_variance_gibbs_prior_draw_without_residuals():
    # a single county has no ICAR residuals, so the draw is from the prior
    g = load_graph([("a", 10)], [])
    data = ModelData.from_counts(np.ones((1, 6, 3), dtype=np.int64), g, START)
    s = initialize(data)
    assert variance_posterior("d", s, data, HyperPriorSpec()) == (0.5, 0.5)


def test_truncated_poisson_matches_pmf():
    rng = np.random.default_rng(6)
    for lam, low in [(3.0, 0), (3.0, 5), (0.5, 4), (40.0, 30), (2.0, 12)]:
        y = truncated_poisson(np.full(100000, lam), np.full(100000, low), rng)
        assert y.min() >= low
        ks = np.arange(low, low + 80)
        p = stats.poisson.pmf(ks, lam)
        p /= p.sum()
        emp = np.bincount(y - low, minlength=80)[:80] / len(y)
        assert 0.5 * np.abs(emp - p).sum() < 0.01


def _single_cell():
    g = load_graph([("a", 5)], [])
    counts = np.zeros((1, 3, 3), dtype=np.int64)
    counts[0, 0] = [2, 1, 0]
    counts[0, 1, :2] = [1, 1]         # S = 2, the delay-2 cell is unobserved
    data = ModelData.from_counts(counts, g, START)
    s = initialize(data)
    s.alpha[:] = math.log(4.0 / 5.0)   # lambda = 4
    s.psi[:] = [-0.5, 0.3]
    s.phi[:] = [3.0, 7.0]
    return data, s


def enumerate_single_cell(lam=4.0, psi=(-0.5, 0.3), phi=(3.0, 7.0), z=(1, 1), top=60):
    """Exact posterior pmf of Y for the single-cell case by brute-force enumeration."""
    def lbb(k, n, a, b):
        lb = lambda p, q: math.lgamma(p) + math.lgamma(q) - math.lgamma(p + q)
        return (math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
                + lb(k + a, n - k + b) - lb(a, b))
    nu = [1.0 / (1.0 + math.exp(-p)) for p in psi]
    S = sum(z)
    logw = []
    for Y in range(S, top + 1):
        lp = Y * math.log(lam) - lam - math.lgamma(Y + 1)
        remaining = Y
        for k, v, f in zip(z, nu, phi):
            lp += lbb(k, remaining, v * f, (1 - v) * f)
            remaining -= k
        logw.append(lp)
    w = np.exp(np.array(logw) - max(logw))
    return np.arange(S, top + 1), w / w.sum()


def test_latent_total_matches_enumeration():
    data, s = _single_cell()
    sm = Sampler(data, HyperPriorSpec(), SamplerConfig(iterations=2, burn_in=1), state=s)
    ys = np.empty(10000, dtype=np.int64)
    for k in range(len(ys)):
        sm.update_latent_totals()
        ys[k] = sm.state.Y[0, 1]
    support, p = enumerate_single_cell()
    emp = np.bincount(ys - support[0], minlength=len(support))[:len(support)] / len(ys)
    assert 0.5 * np.abs(emp - p).sum() < 0.03
    # complete days stay pinned
    assert sm.state.Y[0, 0] == 3


def test_run_chain_determinism_and_streams():
    data = tiny_data()
    cfg = SamplerConfig(iterations=60, burn_in=30, thin=2, seed=11, adapt_interval=10)
    a = run_chain(data, cfg, 0)
    b = run_chain(data, cfg, 0)
    c = run_chain(data, cfg, 1)
    for name in a.samples:
        np.testing.assert_array_equal(a.samples[name], b.samples[name])
    assert not np.array_equal(a.samples["delta"], c.samples["delta"])
    assert a.n_draws == cfg.n_draws == 15


def test_parallel_chains_match_serial():
    data = tiny_data(1)
    cfg = SamplerConfig(iterations=30, burn_in=10, thin=2, chains=2, seed=3, adapt_interval=5)
    serial = run_chains(data, cfg, threads=1)
    parallel = run_chains(data, cfg, threads=2)
    for name in serial.samples:
        np.testing.assert_array_equal(serial.samples[name], parallel.samples[name])
    assert serial.n_chains == 2


def test_sweep_invariants_and_frozen_adaptation():
    data = tiny_data(2)
    cfg = SamplerConfig(iterations=120, burn_in=60, thin=1, seed=4, adapt_interval=20)
    seen = []

    def check(sampler):
        s = sampler.state
        assert abs(s.d.sum()) < 1e-12
        assert (s.Y >= data.partial).all()
        np.testing.assert_array_equal(s.Y[:, data.complete], data.partial[:, data.complete])
        assert -1 < s.rho_delta < 1 and -1 < s.rho_psi < 1
        assert (s.phi > 0).all()
        seen.append(sampler.iteration)

    draws = run_chain(data, cfg, 0, callback=check)
    assert len(seen) == 120
    for name, value in draws.scales_burn_in[0].items():
        np.testing.assert_array_equal(value, draws.scales_final[0][name])
    assert (draws.pooled("Y") >= draws.partial).all()
    assert all(np.isfinite(v).all() for v in draws.samples.values())


def test_adaptation_moves_scales_during_burn_in():
    data = tiny_data(3)
    sm = Sampler(data, HyperPriorSpec(), SamplerConfig(iterations=100, burn_in=50, adapt_interval=10))
    before = sm.scales()
    for _ in range(20):
        sm.sweep()
    after = sm.scales()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_monitored_shapes():
    data = tiny_data(4)
    cfg = SamplerConfig(iterations=20, burn_in=10, thin=5, seed=1, full_state=True)
    draws = run_chain(data, cfg)
    N, T, D = data.shape
    assert draws.samples["delta"].shape == (1, 2, N, T)          # T < 21 keeps every day
    assert draws.samples["Y"].shape == (1, 2, N, int((~data.complete).sum()))
    assert draws.samples["alpha"].shape == (1, 2, N, T)
    assert draws.samples["tau2_psi"].shape == (1, 2)
    assert len(draws.nowcast_dates) == D


def test_combine_concatenates_chains():
    data = tiny_data(5)
    with pytest.raises(ValueError, match="no draws"):
        run_chain(data, SamplerConfig(iterations=10, burn_in=5, seed=1))
    cfg = SamplerConfig(iterations=10, burn_in=5, thin=1, seed=1)
    parts = [run_chain(data, cfg, k) for k in range(3)]
    merged = PosteriorDraws.combine(parts)
    assert merged.n_chains == 3 and len(merged.acceptance) == 3


def test_bad_initial_state_aborts():
    data = tiny_data(6)
    s = initialize(data)
    s.alpha[0, 0] = 80.0
    with pytest.raises(SamplerError):
        Sampler(data, HyperPriorSpec(), SamplerConfig(iterations=2, burn_in=1), state=s)

import datetime as dt

import numpy as np
import pytest
from scipy.special import expit

from nowcast.data import AnalysisWindow, build_triangle, rook_grid
from nowcast.model import HyperPriorSpec, ModelData, stick_breaking_mean
from nowcast.simulate import (
    SimulationConfig,
    censor,
    desk_scenario,
    expected_delay_proportions,
    sample_icar,
    simulate,
)

QUIET = dict(tau2_alpha=0.0, tau2_delta=0.0, tau2_d=0.0, tau2_eta=0.0, tau2_xi=0.0, tau2_psi=0.0,
             delta_bar=0.0, eta_bar=0.0, xi_bar=0.0, alpha1=0.0, rho_delta=0.0, rho_psi=0.0)


def test_flat_rate_equals_population():
    g = rook_grid(10, 10, population=100)
    fixed = dict(QUIET, beta=-1.0, phi=10.0)
    sim = simulate(SimulationConfig(g, T=100, D=5, fixed=fixed, seed=1))
    Y = sim.full_counts
    assert Y.size == 10000
    assert Y.mean() == pytest.approx(100.0, rel=0.02)
    # Poisson dispersion
    assert 0.9 <= Y.var() / Y.mean() <= 1.1


def test_same_seed_same_output_and_closure():
    g = rook_grid(2, 2)
    cfg = SimulationConfig(g, T=40, D=6, fixed=desk_scenario(6), seed=5)
    a, b = simulate(cfg), simulate(cfg)
    np.testing.assert_array_equal(a.delay_counts, b.delay_counts)
    assert a.line_list == b.line_list
    np.testing.assert_array_equal(a.delay_counts.sum(axis=2), a.full_counts)
    assert len(a.line_list) == a.full_counts.sum()
    c = simulate(SimulationConfig(g, T=40, D=6, fixed=desk_scenario(6), seed=6))
    assert not np.array_equal(a.full_counts, c.full_counts)


def test_line_list_rebuilds_the_triangle():
    g = rook_grid(1, 2)
    cfg = SimulationConfig(g, T=30, D=4, fixed=desk_scenario(4), seed=2)
    sim = simulate(cfg)
    window = AnalysisWindow(cfg.as_of_date, 30, 4)
    tri = build_triangle(censor(sim.line_list, cfg.as_of_date), window, g)
    data = sim.model_data()
    np.testing.assert_array_equal(tri.counts, data.counts)
    assert tri.dropped_late == 0
    assert all(r.delay <= 4 for r in sim.line_list)


def test_censor_partition():
    g = rook_grid(1, 2)
    cfg = SimulationConfig(g, T=30, D=4, fixed=desk_scenario(4), seed=3)
    ll = simulate(cfg).line_list
    last = max(r.report_date for r in ll)
    first = min(r.report_date for r in ll)
    assert censor(ll, last) == ll
    assert censor(ll, first - dt.timedelta(days=1)) == []
    kept = censor(ll, cfg.as_of_date)
    removed = [r for r in ll if r.report_date > cfg.as_of_date]
    assert len(kept) + len(removed) == len(ll)


def test_delay_proportions_match_stick_breaking():
    g = rook_grid(5, 5, population=400)
    beta = np.array([-0.5, -1.0, -1.5])
    fixed = dict(QUIET, beta=beta, phi=15.0, alpha1=-1.0)
    sim = simulate(SimulationConfig(g, T=80, D=3, fixed=fixed, seed=4))
    Z, Y = sim.delay_counts, sim.full_counts
    keep = Y > 0
    props = Z[keep] / Y[keep][:, None]
    expect = stick_breaking_mean(expit(beta))
    se = props.std(axis=0, ddof=1) / np.sqrt(len(props))
    assert (np.abs(props.mean(axis=0) - expect) < 3 * se).all()
    np.testing.assert_allclose(expected_delay_proportions(beta), expect)


def test_icar_draw_is_centered_and_scaled():
    g = rook_grid(3, 3)
    rng = np.random.default_rng(0)
    draws = np.array([sample_icar(g, 0.5, rng) for _ in range(4000)])
    assert np.abs(draws.sum(axis=1)).max() < 1e-12
    # E[d' L d] = tau2 * (N - 1)
    q = np.einsum("ki,ij,kj->k", draws, g.laplacian, draws)
    assert q.mean() == pytest.approx(0.5 * 8, rel=0.05)


def test_permuting_the_graph_permutes_outputs():
    g = rook_grid(2, 3, population=[100, 200, 300, 400, 500, 600])
    d = np.array([0.01, -0.02, 0.0, 0.03, -0.01, -0.01])
    fixed = dict(desk_scenario(5), d=d, tau2_delta=0.01)
    base = simulate(SimulationConfig(g, T=35, D=5, fixed=fixed, seed=9))
    order = np.array([4, 0, 5, 2, 1, 3])
    fixed_p = dict(fixed, d=d[order])
    perm = simulate(SimulationConfig(g.permuted(order), T=35, D=5, fixed=fixed_p, seed=9))
    np.testing.assert_array_equal(perm.delay_counts, base.delay_counts[order])
    np.testing.assert_array_equal(perm.truth.delta, base.truth.delta[order])
    assert sorted(perm.line_list, key=repr) == sorted(base.line_list, key=repr)


def test_fixing_one_value_leaves_other_draws_alone():
    g = rook_grid(1, 2)
    tight = HyperPriorSpec(ig_shape=10.0, ig_scale=0.01, delta_bar_var=1e-4)
    a = simulate(SimulationConfig(g, T=30, D=3, prior=tight, fixed=dict(alpha1=-1.0), seed=1))
    b = simulate(SimulationConfig(g, T=30, D=3, prior=tight, fixed=dict(alpha1=-1.0, rho_psi=0.2), seed=1))
    assert a.truth.rho_delta == b.truth.rho_delta
    np.testing.assert_array_equal(a.truth.beta, b.truth.beta)


def test_config_validation():
    g = rook_grid(1, 2)
    with pytest.raises(ValueError):
        SimulationConfig(g, T=30, D=3, fixed={"bogus": 1.0})
    with pytest.raises(ValueError):
        SimulationConfig(g, T=30, D=30)
    with pytest.raises(ValueError):
        simulate(SimulationConfig(g, T=30, D=3, fixed=dict(alpha1=[0.0, 0.0, 0.0])))


def test_model_data_censors_future_cells():
    g = rook_grid(1, 2)
    sim = simulate(SimulationConfig(g, T=30, D=4, fixed=desk_scenario(4), seed=8))
    data = sim.model_data()
    assert isinstance(data, ModelData)
    N, T, D = data.shape
    for t in range(T):
        for d in range(D + 1):
            if t + d > T - 1:
                assert (data.counts[:, t, d] == 0).all()
            else:
                np.testing.assert_array_equal(data.counts[:, t, d], sim.delay_counts[:, t, d])
    np.testing.assert_array_equal(data.partial[:, data.complete], sim.full_counts[:, data.complete])


def test_fixed_trend_path_drives_the_level():
    g = rook_grid(1, 2)
    path = np.where(np.arange(30) < 20, 0.0, 0.1)
    fixed = dict(desk_scenario(3), delta=path, tau2_alpha=0.0)
    sim = simulate(SimulationConfig(g, T=30, D=3, fixed=fixed, seed=2))
    np.testing.assert_array_equal(sim.truth.delta, np.stack([path, path]))
    np.testing.assert_allclose(np.diff(sim.truth.alpha, axis=1), sim.truth.delta[:, :-1])
    with pytest.raises(ValueError):
        simulate(SimulationConfig(g, T=30, D=3, fixed=dict(delta=np.zeros((3, 30)))))

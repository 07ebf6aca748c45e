"""Small fixtures shared by the model and sampler tests."""
import datetime as dt

import numpy as np

from nowcast.data import load_graph
from nowcast.model import ModelData, ModelState

START = dt.date(2020, 6, 1)


def pair_graph(population=50):
    return load_graph([("a", population), ("b", population)], [("a", "b")])


def random_data(rng, graph, T, D, drop_last_day=True, scale=6):
    counts = rng.integers(0, scale, (graph.n, T, D + 1))
    return ModelData.from_counts(counts, graph, START, drop_last_day)


def random_state(rng, data, extra=3):
    N, T, D = data.shape
    Y = data.partial.copy()
    Y[:, ~data.complete] += rng.integers(0, extra + 1, (N, int((~data.complete).sum())))
    d = rng.normal(0, 0.3, N)
    return ModelState(
        alpha=rng.normal(-2, 0.5, (N, T)), delta=rng.normal(0, 0.1, (N, T)),
        delta_bar=float(rng.normal(0, 0.1)), d=d - d.mean(),
        eta=rng.normal(0, 0.2, (N, 6)), eta_bar=rng.normal(0, 0.2, 6),
        psi=rng.normal(-1, 0.5, (N, T, D)), beta=rng.normal(-1, 0.5, D),
        xi=rng.normal(0, 0.2, (N, 6)), xi_bar=rng.normal(0, 0.2, 6),
        rho_delta=float(rng.uniform(-0.9, 0.9)), rho_psi=float(rng.uniform(-0.9, 0.9)),
        phi=rng.gamma(5.0, 2.0, D),
        tau2_alpha=float(rng.uniform(0.05, 1)), tau2_delta=float(rng.uniform(0.05, 1)),
        tau2_d=float(rng.uniform(0.05, 1)), tau2_eta=float(rng.uniform(0.05, 1)),
        tau2_xi=float(rng.uniform(0.05, 1)), tau2_psi=float(rng.uniform(0.05, 1)),
        Y=Y,
    )

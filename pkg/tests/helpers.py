"""Random instances shared by the property, simulation and acceptance tests."""

import numpy as np

from distflow.graph import build_graph, connectivity
from distflow.hamiltonian import quadratic


def random_graph(rng, n_range=(2, 8), max_m=16, weakly_connected=True):
    while True:
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        m = int(rng.integers(n - 1, min(max_m, n * (n - 1)) + 1))
        edges = set()
        while len(edges) < m:
            a, b = rng.integers(0, n, 2)
            if a != b:
                edges.add((int(a), int(b)))
        g = build_graph(sorted(edges), n)
        if not weakly_connected or connectivity(g).weakly_connected:
            return g


def random_adaptive_case(rng):
    """Weakly connected graph, quadratic storage and a start with roughly
    40% of the vertices on their lower bound."""
    g = random_graph(rng)
    w = rng.uniform(0.3, 3, g.n)
    gamma = rng.uniform(-1, 1, g.n)
    x0 = gamma + rng.uniform(0, 2, g.n) * (rng.random(g.n) < 0.6)
    eta0 = rng.normal(0, 3, g.m)
    return g, quadratic(w, gamma), x0, eta0


def random_flows(rng, m):
    """Nonzero flows bounded away from 0."""
    return rng.choice([-1.0, 1.0], m) * rng.uniform(0.2, 3.0, m)


def bundled(name):
    """Path of a scenario shipped with the package."""
    from importlib.resources import files

    return files("distflow") / "scenarios" / name


def run_model(model):
    from distflow.sim import integrate, summarize

    tr = integrate(model.graph, model.hamiltonian, model.controller, model.policy, model.state,
                   model.config, model.d_bar)
    rep = summarize(model.graph, model.hamiltonian, model.controller, model.policy, tr, model.config,
                    model.d_bar, model.enabled)
    return tr, rep

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distflow.graph import (
    BoxBounds,
    GraphError,
    build_graph,
    connectivity,
    interior_point_condition,
    is_acyclic,
    is_balanced,
    weak_components,
)

CIRCLE = [(0, 1), (1, 2), (2, 1), (2, 0)]
FORK = [(0, 1), (1, 2), (1, 3)]
RESERVOIRS = [(0, 1), (1, 2), (2, 0), (0, 3), (3, 2), (0, 4), (4, 1)]


def test_circle_incidence_matrix():
    g = build_graph(CIRCLE, 3)
    expected = [[-1, 0, 0, 1], [1, -1, 1, 0], [0, 1, -1, -1]]
    np.testing.assert_array_equal(g.B, expected)


def test_single_edge():
    np.testing.assert_array_equal(build_graph([(0, 1)], 2).B, [[-1], [1]])


def test_reservoir_network_shape():
    g = build_graph(RESERVOIRS, 5)
    assert g.B.shape == (5, 7)
    assert np.all(g.B.sum(axis=0) == 0)


def test_terminal_matrix():
    g = build_graph(FORK, 4, terminals=[(0, 1), (3, -1)])
    np.testing.assert_array_equal(g.E, [[1, 0], [0, 0], [0, 0], [0, -1]])


@pytest.mark.parametrize(
    "edges, n, terminals",
    [([(0, 0)], 2, ()), ([(0, 2)], 2, ()), ([(0, 1)], 2, [(5, 1)]), ([(0, 1)], 2, [(0, 2)]), ([], 0, ())],
)
def test_build_rejects(edges, n, terminals):
    with pytest.raises(GraphError):
        build_graph(edges, n, terminals)


def test_matrices_are_read_only():
    g = build_graph(FORK, 4)
    with pytest.raises(ValueError):
        g.B[0, 0] = 5


def test_connectivity_examples():
    assert connectivity(build_graph(RESERVOIRS, 5)).strongly_connected
    assert connectivity(build_graph([], 2)).component_count == 2
    fork = connectivity(build_graph(FORK, 4))
    assert fork.weakly_connected and not fork.strongly_connected


def _strong_by_pairs(n, edges):
    # oracle: Floyd-Warshall style reachability from every vertex
    reach = np.eye(n, dtype=bool)
    for t, h in edges:
        reach[t, h] = True
    for k in range(n):
        reach |= reach[:, [k]] & reach[[k], :]
    return bool(reach.all())


def test_balanced_examples():
    assert is_balanced(build_graph([(0, 1), (1, 0)], 2))
    assert not is_balanced(build_graph(FORK, 4))
    g = build_graph(RESERVOIRS, 5)
    assert not is_balanced(g)
    assert g.out_degree()[0] == 3 and g.in_degree()[0] == 1


def test_acyclic_examples():
    assert is_acyclic(build_graph(FORK, 4))
    assert not is_acyclic(build_graph(CIRCLE, 3))
    assert not is_acyclic(build_graph(RESERVOIRS, 5))


@st.composite
def graphs(draw, max_n=12, max_m=30):
    n = draw(st.integers(1, max_n))
    pairs = st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)).filter(lambda p: p[0] != p[1])
    edges = draw(st.lists(pairs, max_size=max_m)) if n > 1 else []
    return build_graph(edges, n)


@settings(max_examples=150, deadline=None)
@given(graphs())
def test_structure_invariants(g):
    assert np.all(g.B.sum(axis=0) == 0)
    c = connectivity(g)  # raises if rank and union-find disagree
    assert c.component_count == len(set(weak_components(g.n, g.edges).tolist()))
    assert c.strongly_connected == _strong_by_pairs(g.n, g.edges)
    assert is_balanced(g) == bool(np.all(g.in_degree() == g.out_degree()))


# interior point condition


def test_two_cycle_interior_point_holds():
    g = build_graph([(0, 1), (1, 0)], 2)
    res = interior_point_condition(g, BoxBounds.uniform(2, 0, 1))
    assert res.holds
    np.testing.assert_allclose(res.witness, [0.5, 0.5], atol=1e-9)
    assert np.max(np.abs(g.B @ res.witness)) <= 1e-9
    assert res.active_edges == {0, 1}


def test_two_cycle_disjoint_intervals_fail():
    g = build_graph([(0, 1), (1, 0)], 2)
    res = interior_point_condition(g, BoxBounds([0, 2], [1, 3]))
    assert not res.holds and res.witness is None
    assert "ker B" in res.diagnostic


def test_reservoirs_symmetric_box():
    g = build_graph(RESERVOIRS, 5)
    res = interior_point_condition(g, BoxBounds.uniform(7, -1, 1))
    assert res.holds
    assert res.active_edges == set(range(7))


def test_acyclic_graph_with_positive_lower_bound_fails():
    # a tree only carries the zero circulation, which is on the lower bound
    g = build_graph(FORK, 4)
    res = interior_point_condition(g, BoxBounds.uniform(3, 0, 1))
    assert not res.holds


def test_isolated_vertex_policy():
    g = build_graph([(0, 1), (1, 0)], 3)
    box = BoxBounds.uniform(2, -1, 1)
    assert not interior_point_condition(g, box).holds
    assert interior_point_condition(g, box, span_all_vertices=False).holds


def test_infinite_bounds_are_capped():
    g = build_graph([(0, 1), (1, 0)], 2)
    res = interior_point_condition(g, BoxBounds([0, 0], [np.inf, 2]))
    assert res.holds
    assert res.cap == pytest.approx(2e6)


@st.composite
def boxed_graphs(draw):
    g = draw(graphs(max_n=5, max_m=8))
    m = g.m
    lo = np.array(draw(st.lists(st.integers(-3, 1), min_size=m, max_size=m)), dtype=float)
    width = np.array(draw(st.lists(st.integers(0, 3), min_size=m, max_size=m)), dtype=float)
    grow = np.array(draw(st.lists(st.integers(0, 2), min_size=m, max_size=m)), dtype=float)
    return g, BoxBounds(lo, lo + width), BoxBounds(lo - grow, lo + width + grow)


@settings(max_examples=60, deadline=None)
@given(boxed_graphs())
def test_interior_point_properties(case):
    g, box, bigger = case
    res = interior_point_condition(g, box)
    if res.witness is not None:
        z = res.witness
        assert np.max(np.abs(g.B @ z), initial=0) <= 1e-9
        assert np.all(z >= box.lower - 1e-9) and np.all(z <= box.upper + 1e-9)
        inside = {j for j in range(g.m) if box.lower[j] + res.margin < z[j] < box.upper[j] - res.margin}
        assert res.active_edges == inside
    if res.holds:
        assert interior_point_condition(g, bigger).holds

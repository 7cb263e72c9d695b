"""Directed network graphs described by their incidence matrix.

Vertices and edges are 0-indexed here; the scenario format uses 1-indexed
labels and converts on the way in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linprog

__all__ = [
    "GraphError",
    "NetworkGraph",
    "BoxBounds",
    "Connectivity",
    "InteriorPointResult",
    "build_graph",
    "weak_components",
    "connectivity",
    "is_balanced",
    "is_acyclic",
    "interior_point_condition",
]

INTERIOR_TOL = 1e-9
_CAP_FACTOR = 1e6


class GraphError(ValueError):
    """Raised for structurally invalid graphs (self-loops, bad indices)."""


@dataclass(frozen=True, eq=False)
class NetworkGraph:
    n: int
    edges: tuple[tuple[int, int], ...]
    terminals: tuple[tuple[int, int], ...]
    B: np.ndarray = field(repr=False)
    E: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def k(self) -> int:
        return len(self.terminals)

    def in_degree(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for _, head in self.edges:
            deg[head] += 1
        return deg

    def out_degree(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for tail, _ in self.edges:
            deg[tail] += 1
        return deg

    def reoriented(self, flipped: Iterable[int]) -> "NetworkGraph":
        """Copy of the graph with the listed edges reversed."""
        flipped = set(flipped)
        edges = [(h, t) if j in flipped else (t, h) for j, (t, h) in enumerate(self.edges)]
        return build_graph(edges, self.n, self.terminals)


@dataclass(frozen=True, eq=False)
class BoxBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).ravel()
        upper = np.asarray(self.upper, dtype=float).ravel()
        if lower.shape != upper.shape:
            raise ValueError("lower and upper bounds must have the same length")
        if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
            raise ValueError("bounds must not be NaN")
        if np.any(lower > upper):
            bad = np.flatnonzero(lower > upper)
            raise ValueError(f"lower > upper on edges {bad.tolist()}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def unbounded(cls, m: int) -> "BoxBounds":
        return cls(np.full(m, -np.inf), np.full(m, np.inf))

    @classmethod
    def uniform(cls, m: int, lower: float, upper: float) -> "BoxBounds":
        return cls(np.full(m, float(lower)), np.full(m, float(upper)))

    def __len__(self) -> int:
        return self.lower.size


def build_graph(
    edges: Sequence[tuple[int, int]],
    n: int,
    terminals: Sequence[tuple[int, int]] = (),
) -> NetworkGraph:
    """Assemble the incidence matrix ``B`` (+1 at the head, -1 at the tail)
    and the terminal matrix ``E`` (one ±1 per column)."""
    n = int(n)
    if n < 1:
        raise GraphError(f"vertex count must be >= 1, got {n}")
    clean_edges = []
    for j, edge in enumerate(edges):
        tail, head = (int(v) for v in edge)
        for v in (tail, head):
            if not 0 <= v < n:
                raise GraphError(f"edge {j}: vertex index {v} out of range [0, {n})")
        if tail == head:
            raise GraphError(f"edge {j}: self-loop at vertex {tail}")
        clean_edges.append((tail, head))

    clean_terms = []
    for c, term in enumerate(terminals):
        vertex, sign = (int(v) for v in term)
        if not 0 <= vertex < n:
            raise GraphError(f"terminal {c}: vertex index {vertex} out of range [0, {n})")
        if sign not in (-1, 1):
            raise GraphError(f"terminal {c}: sign must be +1 or -1, got {sign}")
        clean_terms.append((vertex, sign))

    B = np.zeros((n, len(clean_edges)))
    for j, (tail, head) in enumerate(clean_edges):
        B[tail, j] = -1.0
        B[head, j] = 1.0
    E = np.zeros((n, len(clean_terms)))
    for c, (vertex, sign) in enumerate(clean_terms):
        E[vertex, c] = float(sign)
    B.setflags(write=False)
    E.setflags(write=False)
    return NetworkGraph(n, tuple(clean_edges), tuple(clean_terms), B, E)


def weak_components(n: int, edges: Iterable[tuple[int, int]]) -> np.ndarray:
    """Union-find labels of the undirected components; labels are the
    smallest vertex index of each component."""
    parent = list(range(n))

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for tail, head in edges:
        a, b = find(tail), find(head)
        if a != b:
            parent[max(a, b)] = min(a, b)
    return np.array([find(v) for v in range(n)], dtype=int)


def _reachable(n: int, adjacency: list[list[int]], start: int) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        v = stack.pop()
        for w in adjacency[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return seen


@dataclass(frozen=True)
class Connectivity:
    weakly_connected: bool
    strongly_connected: bool
    component_count: int


def connectivity(g: NetworkGraph) -> Connectivity:
    # dim ker B^T = n - rank B; cross-checked against union-find
    rank = np.linalg.matrix_rank(g.B) if g.m else 0
    count = g.n - rank
    count_uf = len(set(weak_components(g.n, g.edges).tolist()))
    if count != count_uf:
        raise RuntimeError(f"component count mismatch: rank gives {count}, traversal gives {count_uf}")

    forward: list[list[int]] = [[] for _ in range(g.n)]
    backward: list[list[int]] = [[] for _ in range(g.n)]
    for tail, head in g.edges:
        forward[tail].append(head)
        backward[head].append(tail)
    strong = len(_reachable(g.n, forward, 0)) == g.n and len(_reachable(g.n, backward, 0)) == g.n
    return Connectivity(count == 1, strong, count)


def is_balanced(g: NetworkGraph) -> bool:
    by_matrix = bool(np.all(g.B @ np.ones(g.m) == 0))
    by_degree = bool(np.all(g.in_degree() == g.out_degree()))
    assert by_matrix == by_degree
    return by_matrix


def is_acyclic(g: NetworkGraph) -> bool:
    """True when the underlying undirected graph is a forest (ker B = 0)."""
    rank = np.linalg.matrix_rank(g.B) if g.m else 0
    by_rank = rank == g.m
    components = len(set(weak_components(g.n, g.edges).tolist()))
    assert by_rank == (g.m == g.n - components)
    return by_rank


@dataclass
class InteriorPointResult:
    holds: bool
    witness: np.ndarray | None
    active_edges: frozenset[int]
    margin: float
    cap: float
    diagnostic: str = ""


def _capped(bounds: BoxBounds) -> tuple[np.ndarray, np.ndarray, float]:
    finite = np.concatenate([bounds.lower[np.isfinite(bounds.lower)], bounds.upper[np.isfinite(bounds.upper)]])
    scale = max(float(np.max(np.abs(finite))), 1.0) if finite.size else 1.0
    cap = _CAP_FACTOR * scale
    return np.clip(bounds.lower, -cap, cap), np.clip(bounds.upper, -cap, cap), cap


def _max_slack(B, lo, hi, edge, side, cap):
    """max s such that z in ker B and the box, pushed s inside on one side of ``edge``."""
    m = lo.size
    c = np.zeros(m + 1)
    c[-1] = -1.0
    row = np.zeros((1, m + 1))
    if side == "lower":
        row[0, edge] = -1.0
        rhs = [-lo[edge]]
    else:
        row[0, edge] = 1.0
        rhs = [hi[edge]]
    row[0, -1] = 1.0
    A_eq = np.hstack([B, np.zeros((B.shape[0], 1))])
    res = linprog(
        c,
        A_ub=row,
        b_ub=rhs,
        A_eq=A_eq,
        b_eq=np.zeros(B.shape[0]),
        bounds=list(zip(lo, hi)) + [(0.0, 2 * cap)],
        method="highs",
    )
    if res.status != 0:
        return None, None
    return float(-res.fun), res.x[:m]


def interior_point_condition(
    g: NetworkGraph,
    bounds: BoxBounds,
    tol: float = INTERIOR_TOL,
    span_all_vertices: bool = True,
) -> InteriorPointResult:
    """Search for a circulation strictly inside the flow bounds whose interior
    edges connect the graph.

    Each edge gets two LPs maximizing how far the circulation can sit from
    its lower (resp. upper) bound. Averaging all optimal circulations gives a
    point that is strictly interior on every edge that admits interiority at
    all; the condition holds iff those edges form a weakly connected subgraph.

    With ``span_all_vertices`` the subgraph must reach every vertex of the
    graph; otherwise only the vertices touched by interior edges count.
    """
    if len(bounds) != g.m:
        raise ValueError(f"expected {g.m} bounds, got {len(bounds)}")
    lo, hi, cap = _capped(bounds)
    if g.m == 0:
        holds = g.n == 1 or not span_all_vertices
        return InteriorPointResult(holds, np.zeros(0) if holds else None, frozenset(), tol, cap,
                                   "" if holds else "no edges")

    feas = linprog(np.zeros(g.m), A_eq=g.B, b_eq=np.zeros(g.n), bounds=list(zip(lo, hi)), method="highs")
    if feas.status != 0:
        return InteriorPointResult(False, None, frozenset(), tol, cap, "ker B does not meet the flow box")

    witnesses = []
    admitted = np.ones(g.m, dtype=bool)
    for j in range(g.m):
        for side in ("lower", "upper"):
            s, z = _max_slack(g.B, lo, hi, j, side, cap)
            if s is None:
                return InteriorPointResult(False, None, frozenset(), tol, cap, f"LP failure on edge {j}")
            witnesses.append(z)
            if s <= tol:
                admitted[j] = False
    z = np.mean(witnesses, axis=0)

    room = np.minimum(z - lo, hi - z)
    margin = 0.5 * float(np.min(room[admitted])) if admitted.any() else tol
    margin = max(margin, tol)
    active = frozenset(int(j) for j in np.flatnonzero((lo + margin < z) & (z < hi - margin)))

    active_edges = [g.edges[j] for j in sorted(active)]
    labels = weak_components(g.n, active_edges)
    if span_all_vertices:
        holds = len(set(labels.tolist())) == 1
    else:
        touched = {v for e in active_edges for v in e}
        holds = bool(touched) and len({labels[v] for v in touched}) == 1
    diagnostic = "" if holds else f"interior edges {sorted(active)} do not connect the graph"
    return InteriorPointResult(holds, z if holds else None, active, margin, cap, diagnostic)

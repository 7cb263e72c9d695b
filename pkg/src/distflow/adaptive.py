"""Time-varying flow bounds that keep storages at or above their lower bound.

At a given instant the vertices sitting on their bound (gray) and losing
storage (black) get their outgoing flows rescaled. The rescaled flows solve
an equality-constrained QP; an iterative proportional rescaling is provided
as an alternative route to the same balance conditions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.linalg.lapack import dpotrf as potrf, dpotrs as potrs

from .graph import NetworkGraph

__all__ = [
    "ClassifierOptions",
    "VertexClassification",
    "AdaptiveBounds",
    "RescalingResult",
    "FlowProblemInfeasible",
    "gray_mask",
    "black_masks",
    "classify",
    "solve_flow_qp",
    "iterative_rescaling",
    "rescaled_bounds",
    "compute_bounds",
]

log = logging.getLogger(__name__)

CLOSURES = ("one_level", "transitive")
FLOW_BASES = ("raw_mu", "saturated_mu")
BOUND_SOLVERS = ("qp", "iterative")
RANK_TOL = 1e-10
BALANCE_TOL = 1e-9


class FlowProblemInfeasible(RuntimeError):
    """The black-vertex balance equations admit no solution."""

    def __init__(self, message, residual, phi):
        super().__init__(message)
        self.residual = residual
        self.phi = phi


@dataclass(frozen=True)
class ClassifierOptions:
    gray_tolerance: float = 1e-9
    black2_closure: str = "transitive"
    flow_basis: str = "raw_mu"
    bound_solver: str = "qp"

    def __post_init__(self):
        if not self.gray_tolerance > 0:
            raise ValueError("gray_tolerance must be positive")
        if self.black2_closure not in CLOSURES:
            raise ValueError(f"black2_closure must be one of {CLOSURES}")
        if self.flow_basis not in FLOW_BASES:
            raise ValueError(f"flow_basis must be one of {FLOW_BASES}")
        if self.bound_solver not in BOUND_SOLVERS:
            raise ValueError(f"bound_solver must be one of {BOUND_SOLVERS}")


@dataclass(frozen=True)
class VertexClassification:
    white: frozenset[int]
    gray: frozenset[int]
    black1: frozenset[int]
    black2: frozenset[int]
    f_in: tuple[frozenset[int], ...]
    f_out: tuple[frozenset[int], ...]

    @property
    def black(self) -> frozenset[int]:
        return self.black1 | self.black2

    @property
    def e_b_out(self) -> frozenset[int]:
        out: set[int] = set()
        for v in self.black:
            out |= self.f_out[v]
        return frozenset(out)


@dataclass
class AdaptiveBounds:
    phi_star: np.ndarray
    phi_plus: np.ndarray
    free_edges: tuple[int, ...] = ()
    kkt_residual: float = 0.0
    balance_residual: float = 0.0
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    classification: VertexClassification | None = None

    @property
    def lower(self) -> np.ndarray:
        return -self.phi_plus

    @property
    def upper(self) -> np.ndarray:
        return self.phi_plus

    def shrinkage_violations(self, mu) -> list[int]:
        """Free edges where the optimal flow grows or flips sign relative to mu."""
        mu = np.asarray(mu, dtype=float)
        bad = []
        for j in self.free_edges:
            grows = abs(self.phi_star[j]) > abs(mu[j]) * (1 + 1e-12) + 1e-12
            flips = self.phi_star[j] * mu[j] < -1e-12
            if grows or flips:
                bad.append(j)
        return bad


def gray_mask(x, gamma, tol: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    return x <= gamma + np.maximum(tol, tol * np.abs(gamma))


def black_masks(B: np.ndarray, gray: np.ndarray, mu: np.ndarray, closure: str = "transitive"):
    """Mask form of the classification.

    Returns ``(signed, black1, black2, free)`` where ``signed = B * mu``
    (entry ``B_ij mu_j``), ``black1``/``black2`` are vertex masks and ``free``
    marks the out-edges of black vertices. A black1 vertex fed by another
    black vertex is in both masks.
    """
    signed = B * mu
    outgoing = signed < 0
    incoming = signed > 0
    black1 = gray & (signed.sum(axis=1) < 0)
    black2 = np.zeros_like(black1)
    black = black1.copy()
    frontier = black1
    while frontier.any():
        feeding = outgoing[frontier].any(axis=0)
        new = gray & incoming[:, feeding].any(axis=1)
        black2 |= new
        if closure == "one_level":
            break
        frontier = new & ~black
        black |= new
    free = outgoing[black1 | black2].any(axis=0)
    return signed, black1, black2, free


def classify(
    g: NetworkGraph,
    x,
    gamma,
    mu,
    opts: ClassifierOptions | None = None,
    gray: Iterable[int] | None = None,
) -> VertexClassification:
    """Split vertices into white / gray / black given flows ``mu``.

    ``gray`` overrides the detection from ``x``; the integrator uses it to
    hold the gray set fixed over a step.
    """
    opts = opts or ClassifierOptions()
    mu = np.asarray(mu, dtype=float)
    if gray is None:
        x = np.asarray(x, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        slack = np.maximum(opts.gray_tolerance, opts.gray_tolerance * np.abs(gamma))
        if np.any(x < gamma - slack):
            bad = np.flatnonzero(x < gamma - slack).tolist()
            raise ValueError(f"storage below its lower bound at vertices {bad}")
        mask = gray_mask(x, gamma, opts.gray_tolerance)
    else:
        mask = np.zeros(g.n, dtype=bool)
        mask[list(gray)] = True

    signed, black1, black2, _ = black_masks(g.B, mask, mu, opts.black2_closure)

    def members(row):
        return frozenset(np.flatnonzero(row).tolist())

    gray_set = members(mask)
    return VertexClassification(
        frozenset(range(g.n)) - gray_set,
        gray_set,
        members(black1),
        members(black2),
        tuple(members(signed[i] > 0) for i in range(g.n)),
        tuple(members(signed[i] < 0) for i in range(g.n)),
    )


def _qp_blocks(B: np.ndarray, black: np.ndarray, free: np.ndarray):
    """Constraint blocks for a black/free pattern: (A, B_fixed, fixed mask)."""
    Bb = B[black]
    fixed = np.ones(B.shape[1], dtype=bool)
    fixed[free] = False
    return Bb[:, free], Bb[:, fixed], fixed


def _qp_solve(A: np.ndarray, b: np.ndarray, mu_f: np.ndarray):
    """KKT solve of the flow QP; returns (phi_free, lam, kkt_res, bal_res).

    The Hessian is diagonal, so the multipliers solve the Schur complement
    A D^-1 A^T lam = A D^-1 c - b. A Cholesky pivot below the rank tolerance
    means dependent balance rows, and the full KKT system then goes through
    least squares instead.
    """
    hess = 2.0 / np.abs(mu_f)
    lin = np.sign(mu_f)
    dinv = 0.5 * np.abs(mu_f)
    S = (A * dinv) @ A.T
    rhs = A @ (dinv * lin) - b
    L, info = potrf(S, lower=1)
    piv = np.diag(L) ** 2
    if info == 0 and piv.min() > RANK_TOL * piv.max():
        lam, _ = potrs(L, rhs, lower=1)
        phi_f = dinv * (lin - A.T @ lam)
    else:
        nf, nb = A.shape[1], A.shape[0]
        kkt = np.zeros((nf + nb, nf + nb))
        kkt[np.arange(nf), np.arange(nf)] = hess
        kkt[:nf, nf:] = A.T
        kkt[nf:, :nf] = A
        sol = np.linalg.lstsq(kkt, np.concatenate([lin, b]), rcond=RANK_TOL)[0]
        phi_f, lam = sol[:nf], sol[nf:]
    # A is never empty here: callers only solve with black vertices and free edges
    kkt_res = float(np.abs(hess * phi_f - lin + A.T @ lam).max())
    bal_res = float(np.abs(A @ phi_f - b).max())
    return phi_f, lam, kkt_res, bal_res


def _qp_core(B: np.ndarray, mu: np.ndarray, black: np.ndarray, free: np.ndarray):
    """Flow QP on index arrays; see :func:`_qp_solve`."""
    A, B_fixed, fixed = _qp_blocks(B, black, free)
    return _qp_solve(A, -B_fixed @ mu[fixed], mu[free])


def solve_flow_qp(
    g: NetworkGraph,
    mu,
    cls: VertexClassification,
    strict: bool = True,
) -> AdaptiveBounds:
    """Minimize sum over free edges of ((phi_j - mu_j)^2 + phi_j^2) / (2|mu_j|)
    subject to zero net flow at every black vertex, with all other edges
    pinned to mu.

    The KKT system is solved densely; rank-deficient balance rows are handled
    by a least-squares solve. With ``strict`` an inconsistent balance system
    raises :class:`FlowProblemInfeasible`.
    """
    mu = np.asarray(mu, dtype=float)
    free = tuple(sorted(cls.e_b_out))
    black = sorted(cls.black)
    phi = mu.copy()
    phi_plus = np.full(g.m, np.inf)
    if not black or not free:
        return AdaptiveBounds(phi, phi_plus, (), classification=cls)
    if np.any(mu[list(free)] == 0):
        raise ValueError("free edges must carry non-zero flow")

    phi_f, lam, kkt_res, bal_res = _qp_core(g.B, mu, np.array(black), np.array(free))
    phi[list(free)] = phi_f
    scale = 1.0 + float(np.max(np.abs(mu)))
    if bal_res > BALANCE_TOL * scale:
        msg = f"black-vertex balance is inconsistent (residual {bal_res:.3e}) for black set {black}"
        if strict:
            raise FlowProblemInfeasible(msg, bal_res, phi)
        log.warning(msg)
    phi_plus[list(free)] = np.abs(phi_f)
    return AdaptiveBounds(phi, phi_plus, free, kkt_res, bal_res, lam, cls)


@dataclass
class RescalingResult:
    phi: np.ndarray
    iterations: int
    converged: bool
    defect: float
    monotone: bool


def _rescale_core(phi: list, ins: list, outs: list, tol: float, max_iter: int):
    """In-place sweeps on absolute flows; returns (iterations, converged, monotone)."""
    monotone = True
    for it in range(1, max_iter + 1):
        change = 0.0
        for ein, eout in zip(ins, outs):
            inflow = sum(phi[j] for j in ein)
            outflow = sum(phi[j] for j in eout)
            if inflow < outflow:
                ratio = inflow / outflow
                for j in eout:
                    new = ratio * phi[j]
                    change = max(change, phi[j] - new)
                    if new > phi[j]:
                        monotone = False
                    phi[j] = new
        if change <= tol:
            return it, True, monotone
    return max_iter, False, monotone


def iterative_rescaling(
    g: NetworkGraph,
    mu,
    cls: VertexClassification,
    tol: float = 1e-12,
    max_iter: int = 1_000_000,
) -> RescalingResult:
    """Repeatedly scale the out-flows of each black vertex in deficit so that
    its out-flow equals its in-flow.

    Vertices are swept in ascending order; a sweep that moves no flow by more
    than ``tol`` ends the iteration. ``defect`` is the largest remaining net
    outflow over black vertices.
    """
    mu = np.asarray(mu, dtype=float)
    phi = [abs(v) for v in mu.tolist()]  # scaling never changes signs
    black = sorted(cls.black)
    ins = [sorted(cls.f_in[i]) for i in black]
    outs = [sorted(cls.f_out[i]) for i in black]
    it, converged, monotone = _rescale_core(phi, ins, outs, tol, max_iter)
    defect = max((sum(phi[j] for j in eout) - sum(phi[j] for j in ein) for ein, eout in zip(ins, outs)),
                 default=0.0)
    if not converged:
        log.warning("iterative rescaling stopped after %d sweeps, defect %.3e", it, defect)
    return RescalingResult(np.sign(mu) * np.array(phi), it, converged, max(defect, 0.0), monotone)


def rescaled_bounds(g: NetworkGraph, mu, cls: VertexClassification, tol: float = 1e-13) -> AdaptiveBounds:
    """Bounds taken from the fixed point of :func:`iterative_rescaling`."""
    mu = np.asarray(mu, dtype=float)
    free = tuple(sorted(cls.e_b_out))
    res = iterative_rescaling(g, mu, cls, tol=tol)
    phi_plus = np.full(g.m, np.inf)
    phi_plus[list(free)] = np.abs(res.phi[list(free)])
    return AdaptiveBounds(res.phi, phi_plus, free, balance_residual=res.defect, classification=cls)


def compute_bounds(
    g: NetworkGraph,
    x,
    gamma,
    mu,
    opts: ClassifierOptions | None = None,
    gray: Iterable[int] | None = None,
    strict: bool = True,
) -> AdaptiveBounds:
    """Classification followed by the flow problem; the saturation interval
    is [-phi_plus, phi_plus]."""
    opts = opts or ClassifierOptions()
    cls = classify(g, x, gamma, mu, opts, gray)
    if not cls.black or not cls.e_b_out:
        return AdaptiveBounds(np.asarray(mu, dtype=float).copy(), np.full(g.m, np.inf), classification=cls)
    if opts.bound_solver == "iterative":
        return rescaled_bounds(g, mu, cls)
    return solve_flow_qp(g, mu, cls, strict=strict)

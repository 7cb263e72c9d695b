"""PI feedback on the edges of a distribution network and the closed-loop
vector field it induces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import linprog, minimize

from .graph import BoxBounds, NetworkGraph
from .hamiltonian import ControllerHamiltonian, VertexHamiltonian

__all__ = [
    "ConfigurationError",
    "PIController",
    "SystemState",
    "ConstraintPolicy",
    "Flows",
    "NormalizedConstraints",
    "MatchingResult",
    "saturate",
    "controller_output",
    "closed_loop_rhs",
    "normalize_constraints",
    "solve_matching",
    "has_common_open_interval",
]

MODES = ("unconstrained", "box", "adaptive")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PIController:
    gains: np.ndarray
    hc: ControllerHamiltonian

    def __post_init__(self):
        r = np.asarray(self.gains, dtype=float).ravel()
        if r.size != self.hc.m:
            raise ConfigurationError(f"{r.size} gains for {self.hc.m} edges")
        if np.any(r <= 0) or not np.all(np.isfinite(r)):
            raise ConfigurationError("damping gains must be strictly positive")
        r.setflags(write=False)
        object.__setattr__(self, "gains", r)

    @classmethod
    def standard(cls, m: int) -> "PIController":
        """R = I and H_c = 1/2 ||eta||^2."""
        return cls(np.ones(m), ControllerHamiltonian.standard(m))

    @property
    def is_standard(self) -> bool:
        return bool(np.all(self.gains == 1.0)) and self.hc.is_standard


@dataclass
class SystemState:
    x: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).copy()
        self.eta = np.asarray(self.eta, dtype=float).copy()
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.eta))):
            raise ValueError("state must be finite")

    def copy(self) -> "SystemState":
        return SystemState(self.x, self.eta)


@dataclass(frozen=True)
class ConstraintPolicy:
    """Flow-bound regime: ``unconstrained``, constant ``box`` or ``adaptive``."""

    mode: str = "unconstrained"
    bounds: BoxBounds | None = None
    options: object = None  # adaptive.ClassifierOptions; untyped to avoid an import cycle

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown constraint mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "box" and self.bounds is None:
            raise ConfigurationError("box mode needs bounds")
        if self.mode == "adaptive" and self.options is None:
            from .adaptive import ClassifierOptions

            object.__setattr__(self, "options", ClassifierOptions())


class Flows(NamedTuple):
    xdot: np.ndarray
    etadot: np.ndarray
    mu: np.ndarray
    mu_sat: np.ndarray


def saturate(x, a, b) -> np.ndarray:
    """Element-wise clamp of ``x`` into the closed box ``[a, b]``."""
    x = np.asarray(x, dtype=float)
    a = np.broadcast_to(np.asarray(a, dtype=float), x.shape)
    b = np.broadcast_to(np.asarray(b, dtype=float), x.shape)
    if np.any(a > b):
        raise ConfigurationError(f"saturation bounds inverted on components {np.flatnonzero(a > b).tolist()}")
    return np.minimum(np.maximum(x, a), b)


def controller_output(c: PIController, zeta, eta) -> np.ndarray:
    """mu = -R zeta - grad H_c(eta)."""
    return -c.gains * np.asarray(zeta, dtype=float) - c.hc.gradient(eta)


def closed_loop_rhs(
    g: NetworkGraph,
    h: VertexHamiltonian,
    c: PIController,
    s: SystemState,
    bounds: BoxBounds | None = None,
    d_bar=None,
) -> Flows:
    """Closed-loop vector field with flows saturated to ``bounds``
    (no saturation when ``bounds`` is None)."""
    x, eta = s.x, s.eta
    if x.size != g.n or eta.size != g.m:
        raise ValueError(f"state shape ({x.size}, {eta.size}) does not match graph ({g.n}, {g.m})")
    y = h.gradient(x)
    zeta = g.B.T @ y
    mu = controller_output(c, zeta, eta)
    mu_sat = mu if bounds is None else saturate(mu, bounds.lower, bounds.upper)
    xdot = g.B @ mu_sat
    if d_bar is not None and g.k:
        d = np.asarray(d_bar, dtype=float)
        if d.size != g.k:
            raise ValueError(f"disturbance has {d.size} entries for {g.k} terminals")
        xdot = xdot + g.E @ d
    return Flows(xdot, zeta, mu, mu_sat)


class NormalizedConstraints(NamedTuple):
    bounds: BoxBounds
    flipped: frozenset[int]
    straddling: frozenset[int]
    graph: NetworkGraph


def normalize_constraints(bounds: BoxBounds, g: NetworkGraph) -> NormalizedConstraints:
    """Reorient edges whose flow interval lies on the negative half-line so
    that the bounds read 0 <= lower <= upper wherever possible.

    A reversed edge carries the negated flow, so its controller state must be
    negated as well when moving a state between the two descriptions.
    """
    lower, upper = bounds.lower.copy(), bounds.upper.copy()
    flip = (upper <= 0) & (lower < 0)
    lower[flip], upper[flip] = -bounds.upper[flip], -bounds.lower[flip]
    straddle = (lower < 0) & (upper > 0)
    flipped = frozenset(int(j) for j in np.flatnonzero(flip))
    return NormalizedConstraints(
        BoxBounds(lower, upper),
        flipped,
        frozenset(int(j) for j in np.flatnonzero(straddle)),
        g.reoriented(flipped) if flipped else g,
    )


def has_common_open_interval(bounds: BoxBounds) -> bool:
    return bool(np.max(bounds.lower) < np.min(bounds.upper)) if len(bounds) else True


@dataclass
class MatchingResult:
    matchable: bool
    eta_bar: np.ndarray | None
    v_bar: np.ndarray | None
    residual: float
    unique: bool = False
    diagnostic: str = field(default="")


def solve_matching(
    g: NetworkGraph,
    d_bar,
    hc: ControllerHamiltonian,
    bounds: BoxBounds | None = None,
) -> MatchingResult:
    """Find a controller state whose steady flows cancel the terminal flows.

    ``v_bar`` solves ``B v_bar = E d_bar`` with minimum norm and
    ``eta_bar = grad H_c^{-1}(v_bar)``. The steady edge flow is ``-v_bar``,
    so in the constrained variant it is ``-v_bar`` that must respect the box.
    """
    d = np.zeros(g.k) if d_bar is None else np.asarray(d_bar, dtype=float).ravel()
    target = g.E @ d if g.k else np.zeros(g.n)
    tol = 1e-9 * (1.0 + float(np.max(np.abs(target), initial=0.0)))

    if g.m == 0:
        ok = bool(np.max(np.abs(target), initial=0.0) <= tol)
        return MatchingResult(ok, np.zeros(0) if ok else None, np.zeros(0) if ok else None,
                              float(np.max(np.abs(target), initial=0.0)), ok)

    if bounds is None:
        v, *_ = np.linalg.lstsq(g.B, target, rcond=None)
        residual = float(np.max(np.abs(g.B @ v - target), initial=0.0))
        if residual > tol:
            return MatchingResult(False, None, None, residual, diagnostic="E d_bar is not in im B")
        unique = np.linalg.matrix_rank(g.B) == g.m
        return MatchingResult(True, hc.inverse_gradient(v), v, residual, bool(unique))

    # steady flow f = -v must lie in [lower, upper]
    lo, hi = -bounds.upper, -bounds.lower
    feas = linprog(np.zeros(g.m), A_eq=g.B, b_eq=target, bounds=list(zip(lo, hi)), method="highs")
    if feas.status != 0:
        return MatchingResult(False, None, None, float("inf"),
                              diagnostic="no flow inside the bounds cancels the terminal flows")
    v0 = feas.x
    box = [(None if not np.isfinite(a) else a, None if not np.isfinite(b) else b) for a, b in zip(lo, hi)]
    res = minimize(
        lambda v: 0.5 * v @ v,
        v0,
        jac=lambda v: v,
        bounds=box,
        constraints=[{"type": "eq", "fun": lambda v: g.B @ v - target, "jac": lambda v: g.B}],
        method="SLSQP",
        options={"ftol": 1e-14, "maxiter": 500},
    )
    v = v0
    if res.success:
        cand = np.clip(res.x, lo, hi)
        if np.max(np.abs(g.B @ cand - target), initial=0.0) <= tol:
            v = cand
    residual = float(np.max(np.abs(g.B @ v - target), initial=0.0))
    return MatchingResult(residual <= tol, hc.inverse_gradient(v), v, residual, False)

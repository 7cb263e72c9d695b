"""Fixed-step integration of the closed loop with invariant monitors.

Under the adaptive policy the set of gray vertices is frozen at the start of
every step, while black vertices and bounds are recomputed at each internal
stage. Every stage then has non-negative net flow into each gray vertex, so
RK4's positive weights keep those vertices on or above their bound. A white
vertex that would cross its bound inside a step triggers a bisection of the
step so that it lands just above the bound and turns gray.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adaptive import BALANCE_TOL, ClassifierOptions, _qp_blocks, _qp_solve, _rescale_core, black_masks
from .controller import ConfigurationError, ConstraintPolicy, PIController, SystemState
from .graph import NetworkGraph, weak_components
from .hamiltonian import VertexHamiltonian

__all__ = [
    "SimulationError",
    "SimConfig",
    "Trajectory",
    "Consensus",
    "RunReport",
    "integrate",
    "integrate_proportional",
    "monitor_conservation",
    "monitor_lyapunov",
    "detect_consensus",
    "summarize",
]

log = logging.getLogger(__name__)

INTEGRATORS = ("rk4_fixed", "euler_fixed")
_BISECT_ITERS = 80


class SimulationError(RuntimeError):
    """Numerical abort: non-finite state, runaway sub-stepping, infeasible bounds."""


@dataclass(frozen=True)
class SimConfig:
    t_end: float = 30.0
    h: float = 1e-3
    integrator: str = "rk4_fixed"
    record_every: int = 10
    consensus_tol: float = 1e-4
    lyapunov_slack: float = 1e-6
    clamp_guard: bool = True
    clamp_tol: float = 1e-6
    max_substeps: int = 500

    def __post_init__(self):
        if not (self.h > 0 and self.t_end > 0):
            raise ConfigurationError("h and t_end must be positive")
        if not (self.consensus_tol > 0 and self.lyapunov_slack > 0 and self.clamp_tol > 0):
            raise ConfigurationError("tolerances must be positive")
        if self.integrator not in INTEGRATORS:
            raise ConfigurationError(f"integrator must be one of {INTEGRATORS}")
        if self.record_every < 1:
            raise ConfigurationError("record_every must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.h))


@dataclass
class Trajectory:
    times: np.ndarray
    x: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    mu_sat: np.ndarray
    phi_plus: np.ndarray
    V: np.ndarray
    mass: np.ndarray
    black: list[tuple[int, ...]]
    gamma: np.ndarray
    # per-step diagnostics, gathered at every step rather than every sample
    min_margin: float = np.inf
    max_step_dV: float = -np.inf
    max_step_drift: float = 0.0
    clamp_deficits: list[tuple[float, int, float]] = field(default_factory=list)
    events: int = 0
    substeps: int = 0
    chattering: int = 0
    shrinkage_flags: int = 0

    def __len__(self) -> int:
        return self.times.size

    def finite_bounds(self, k: int) -> dict[int, float]:
        row = self.phi_plus[k]
        return {int(j): float(row[j]) for j in np.flatnonzero(np.isfinite(row))}

    @property
    def max_clamp_deficit(self) -> float:
        return max((d for _, _, d in self.clamp_deficits), default=0.0)


class _Model:
    """Closed-loop vector field specialised for repeated evaluation."""

    def __init__(self, g, h, c, policy, d_bar):
        self.g, self.h, self.c, self.policy = g, h, c, policy
        self.B, self.BT = g.B, np.ascontiguousarray(g.B.T)
        self.R = c.gains
        self.gamma = h.gamma
        self.adaptive = policy.mode == "adaptive"
        self.opts: ClassifierOptions = policy.options if self.adaptive else ClassifierOptions()
        self.slack = np.maximum(self.opts.gray_tolerance, self.opts.gray_tolerance * np.abs(self.gamma))
        self.inflow = np.zeros(g.n)
        if d_bar is not None and g.k:
            d = np.asarray(d_bar, dtype=float)
            if self.adaptive and np.any(d != 0):
                raise ConfigurationError("adaptive bounds are only defined without in/outflows (d_bar = 0)")
            self.inflow = g.E @ d
        self.unbounded = np.full(g.m, np.inf)
        self.prev_plus = self.unbounded
        self.shrinkage_flags = 0
        self._blocks = {}  # QP constraint blocks per (black, free) pattern

    def bounds(self, x, mu, gray):
        """Returns (lower, upper, phi_plus, black set)."""
        m = self.g.m
        if self.policy.mode == "box":
            return self.policy.bounds.lower, self.policy.bounds.upper, self.unbounded, ()
        if not self.adaptive or not gray.any():
            return None, None, self.unbounded, ()
        # saturated_mu classifies with the flows clipped by the last bounds in force
        basis = mu if self.opts.flow_basis == "raw_mu" else np.clip(mu, -self.prev_plus, self.prev_plus)
        signed, black1, black2, free = black_masks(self.B, gray, basis, self.opts.black2_closure)
        black_mask = black1 | black2
        black = tuple(np.flatnonzero(black_mask).tolist())
        if not black or not free.any():
            self.prev_plus = self.unbounded
            return None, None, self.unbounded, black
        free_idx = np.flatnonzero(free)
        if self.opts.bound_solver == "iterative":
            phi = np.abs(basis).tolist()
            rows = signed[black_mask]
            ins = [np.flatnonzero(r > 0).tolist() for r in rows]
            outs = [np.flatnonzero(r < 0).tolist() for r in rows]
            _rescale_core(phi, ins, outs, 1e-13, 1_000_000)
            mag = np.array(phi)[free_idx]
        else:
            key = (black_mask.tobytes(), free.tobytes())
            blocks = self._blocks.get(key)
            if blocks is None:
                blocks = self._blocks[key] = _qp_blocks(self.B, np.asarray(black), free_idx)
            A, B_fixed, fixed = blocks
            phi_f, _, _, bal = _qp_solve(A, -B_fixed @ basis[fixed], basis[free_idx])
            if bal > BALANCE_TOL * (1.0 + float(np.max(np.abs(basis)))):
                raise SimulationError(f"black-vertex balance is inconsistent (residual {bal:.3e}) "
                                      f"for black set {list(black)}")
            mag = np.abs(phi_f)
            # shrinkage: the optimal flow should neither grow nor flip sign
            ref = basis[free_idx]
            if np.any((np.abs(phi_f) > np.abs(ref) * (1 + 1e-12) + 1e-12) | (phi_f * ref < -1e-12)):
                self.shrinkage_flags += 1
        plus = np.full(m, np.inf)
        plus[free_idx] = mag
        self.prev_plus = plus
        return -plus, plus, plus, black

    def rhs(self, x, eta, gray):
        y = self.h.gradient(x)
        zeta = self.BT @ y
        mu = -self.R * zeta - self.c.hc.gradient(eta)
        lo, hi, plus, black = self.bounds(x, mu, gray)
        mu_sat = mu if lo is None else np.minimum(np.maximum(mu, lo), hi)
        return self.B @ mu_sat + self.inflow, zeta, mu, mu_sat, plus, black

    def gray_set(self, x) -> np.ndarray:
        """Boolean mask of vertices on their bound (all False unless adaptive)."""
        if not self.adaptive:
            return np.zeros(self.g.n, dtype=bool)
        return x <= self.gamma + self.slack

    def energy(self, x, eta) -> float:
        return self.h(x) + self.c.hc(eta)


def _rk4(model: _Model, x, eta, dt, gray):
    k1x, k1e, *_ = model.rhs(x, eta, gray)
    k2x, k2e, *_ = model.rhs(x + 0.5 * dt * k1x, eta + 0.5 * dt * k1e, gray)
    k3x, k3e, *_ = model.rhs(x + 0.5 * dt * k2x, eta + 0.5 * dt * k2e, gray)
    k4x, k4e, *_ = model.rhs(x + dt * k3x, eta + dt * k3e, gray)
    return (x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x),
            eta + dt / 6.0 * (k1e + 2 * k2e + 2 * k3e + k4e))


def _euler(model: _Model, x, eta, dt, gray):
    kx, ke, *_ = model.rhs(x, eta, gray)
    return x + dt * kx, eta + dt * ke


def _land(model, stepper, x, eta, dt, gray, white):
    """Largest sub-step keeping white vertices above their bound, refined
    until one of them sits within half the gray tolerance."""
    gamma, half = model.gamma[white], 0.5 * model.slack[white]
    lo, hi = 0.0, dt
    best = (x, eta)
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        xm, em = stepper(model, x, eta, mid, gray)
        margin = xm[white] - gamma
        if np.any(margin < 0):
            hi = mid
        else:
            lo, best = mid, (xm, em)
            if np.any(margin <= half):
                break
    return lo, best[0], best[1]


def integrate(
    g: NetworkGraph,
    h: VertexHamiltonian,
    c: PIController,
    policy: ConstraintPolicy,
    s0: SystemState,
    cfg: SimConfig,
    d_bar=None,
) -> Trajectory:
    model = _Model(g, h, c, policy, d_bar)
    stepper = _rk4 if cfg.integrator == "rk4_fixed" else _euler
    x, eta = s0.x.copy(), s0.eta.copy()
    if x.size != g.n or eta.size != g.m:
        raise ConfigurationError(f"initial state shape ({x.size}, {eta.size}) does not match graph ({g.n}, {g.m})")
    gamma = model.gamma
    if model.adaptive and np.any(x < gamma - model.slack):
        raise ConfigurationError("adaptive policy needs x(0) >= gamma")

    n_steps = cfg.n_steps
    samples: dict[str, list] = {k: [] for k in ("t", "x", "eta", "mu", "mu_sat", "plus", "V", "mass", "black")}

    def record(t, x, eta, gray):
        _, _, mu, mu_sat, plus, black = model.rhs(x, eta, gray)
        samples["t"].append(t)
        samples["x"].append(x.copy())
        samples["eta"].append(eta.copy())
        samples["mu"].append(mu)
        samples["mu_sat"].append(mu_sat)
        samples["plus"].append(plus)
        samples["V"].append(model.energy(x, eta))
        samples["mass"].append(float(np.sum(x)))
        samples["black"].append(black)

    gray = model.gray_set(x)
    record(0.0, x, eta, gray)
    mass0 = float(np.sum(x))
    V_prev = model.energy(x, eta)
    min_margin = float(np.min(x - gamma)) if g.n else np.inf
    max_dV, max_drift = -np.inf, 0.0
    deficits: list[tuple[float, int, float]] = []
    events = substeps = chattering = 0
    last_sig, last_change = None, -10

    for k in range(n_steps):
        t0 = k * cfg.h
        remaining, done, subs = cfg.h, 0.0, 0
        while remaining > 1e-12 * cfg.h:
            gray = model.gray_set(x)
            xn, en = stepper(model, x, eta, remaining, gray)
            dt = remaining
            if model.adaptive:
                white = ~gray
                if np.any(xn[white] < gamma[white]):
                    dt, xn, en = _land(model, stepper, x, eta, remaining, gray, white)
                    events += 1
                if gray.any():
                    idx = np.flatnonzero(gray)
                    below = xn[idx] < gamma[idx]
                    if np.any(below):
                        for i in idx[below]:
                            deficits.append((t0 + done + dt, int(i), float(gamma[i] - xn[i])))
                        if cfg.clamp_guard:
                            xn[idx] = np.maximum(xn[idx], gamma[idx])
            if not (np.all(np.isfinite(xn)) and np.all(np.isfinite(en))):
                raise SimulationError(f"non-finite state at t = {t0 + done:.6g}")
            x, eta = xn, en
            remaining -= dt
            done += dt
            subs += 1
            if subs > cfg.max_substeps:
                raise SimulationError(f"more than {cfg.max_substeps} sub-steps in step starting at t = {t0:.6g}")
        substeps += subs

        V = model.energy(x, eta)
        max_dV = max(max_dV, V - V_prev)
        V_prev = V
        max_drift = max(max_drift, abs(float(np.sum(x)) - mass0))
        if g.n:
            min_margin = min(min_margin, float(np.min(x - gamma)))
        if model.adaptive:
            sig = tuple(np.flatnonzero(model.gray_set(x)).tolist())
            if sig != last_sig:
                if k - last_change < 3:
                    chattering += 1
                last_sig, last_change = sig, k
        if (k + 1) % cfg.record_every == 0 or k == n_steps - 1:
            record((k + 1) * cfg.h, x, eta, model.gray_set(x))

    if chattering:
        log.warning("gray set changed within 3 steps of a previous change %d times", chattering)
    arr = {key: np.array(val) for key, val in samples.items() if key != "black"}
    return Trajectory(
        arr["t"], arr["x"], arr["eta"], arr["mu"], arr["mu_sat"], arr["plus"], arr["V"], arr["mass"],
        samples["black"], gamma.copy(), min_margin, max_dV, max_drift, deficits, events, substeps, chattering,
        model.shrinkage_flags,
    )


def integrate_proportional(
    g: NetworkGraph,
    h: VertexHamiltonian,
    gains,
    x0,
    t_end: float,
    dt: float = 1e-3,
) -> tuple[np.ndarray, np.ndarray]:
    """Proportional-only loop x' = -B R B^T grad H(x), fixed-step RK4."""
    R = np.asarray(gains, dtype=float) * np.ones(g.m)
    L = g.B * R @ g.B.T

    def f(x):
        return -L @ h.gradient(x)

    x = np.asarray(x0, dtype=float).copy()
    n_steps = int(round(t_end / dt))
    out = [x.copy()]
    for _ in range(n_steps):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(x.copy())
    return np.arange(n_steps + 1) * dt, np.array(out)


def monitor_conservation(tr: Trajectory) -> float:
    mass = tr.x.sum(axis=1)
    return float(np.max(np.abs(mass - mass[0]))) if mass.size else 0.0


def monitor_lyapunov(tr: Trajectory, h: VertexHamiltonian, hc) -> float:
    """Largest increase of H(x) + H_c(eta) between consecutive samples (0 if none)."""
    V = np.array([h(x) + hc(e) for x, e in zip(tr.x, tr.eta)])
    if V.size < 2:
        return 0.0
    return max(0.0, float(np.max(np.diff(V))))


@dataclass
class Consensus:
    reached: bool
    time: float | None
    alpha: float | None
    residual: float
    spread: float
    component_alphas: list[float]


def detect_consensus(tr: Trajectory, g: NetworkGraph, h: VertexHamiltonian, tol: float) -> Consensus:
    """Outputs agree once ||B^T grad H(x)||_inf stays below ``tol`` until the end.

    Edge differences cannot see separate components, so the final output
    spread must also be within (n - 1) * tol, which a connected graph
    satisfies automatically.
    """
    Y = np.array([h.gradient(x) for x in tr.x])
    residual = np.max(np.abs(Y @ g.B), axis=1) if g.m else np.zeros(len(tr))
    labels = weak_components(g.n, g.edges)
    comps = [float(np.mean(Y[-1][labels == c])) for c in sorted(set(labels.tolist()))]
    spread = float(np.ptp(Y[-1]))
    above = np.flatnonzero(residual > tol)
    first = 0 if above.size == 0 else int(above[-1]) + 1
    reached = first < len(tr) and spread <= max(g.n - 1, 1) * tol
    return Consensus(
        bool(reached),
        float(tr.times[first]) if reached else None,
        float(np.mean(Y[-1])) if reached else None,
        float(residual[-1]),
        spread,
        comps,
    )


@dataclass
class RunReport:
    min_margin: float
    consensus: Consensus
    conservation_drift: float
    max_lyapunov_increment: float
    max_clamp_deficit: float
    events: int
    chattering: int
    shrinkage_flags: int
    monitors: dict[str, tuple[bool, bool]]  # name -> (enabled, passed)
    conditions: dict[str, object] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(ok for enabled, ok in self.monitors.values() if enabled)


def default_monitors(policy: ConstraintPolicy, g: NetworkGraph, d_bar) -> dict[str, bool]:
    d = np.zeros(g.k) if d_bar is None else np.asarray(d_bar, dtype=float)
    balanced_terminals = (not g.k) or abs(float(np.ones(g.n) @ g.E @ d)) == 0.0
    no_inflow = not g.k or not np.any(d)
    return {
        "lower_bound": policy.mode == "adaptive",
        "conservation": balanced_terminals,
        "lyapunov": no_inflow and policy.mode in ("adaptive", "unconstrained"),
        "consensus": True,
    }


def summarize(
    g: NetworkGraph,
    h: VertexHamiltonian,
    c: PIController,
    policy: ConstraintPolicy,
    tr: Trajectory,
    cfg: SimConfig,
    d_bar=None,
    enabled: dict[str, bool] | None = None,
    conditions: dict | None = None,
) -> RunReport:
    enabled = enabled or default_monitors(policy, g, d_bar)
    cons = detect_consensus(tr, g, h, cfg.consensus_tol)
    drift = max(monitor_conservation(tr), tr.max_step_drift)
    dV = max(monitor_lyapunov(tr, h, c.hc), tr.max_step_dV, 0.0)
    margin = min(tr.min_margin, float(np.min(tr.x - tr.gamma)))
    results = {
        "lower_bound": margin >= -cfg.clamp_tol and tr.max_clamp_deficit <= cfg.clamp_tol,
        "conservation": drift <= 1e-8,
        "lyapunov": dV <= cfg.lyapunov_slack,
        "consensus": cons.reached,
    }
    monitors = {name: (bool(enabled.get(name, False)), bool(ok)) for name, ok in results.items()}
    return RunReport(margin, cons, drift, dV, tr.max_clamp_deficit, tr.events, tr.chattering,
                     tr.shrinkage_flags, monitors, conditions or {})

"""Structural checks of a scenario against the hypotheses of the convergence
results, and text emission of check reports, run reports and trajectories."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .controller import has_common_open_interval, normalize_constraints, solve_matching
from .graph import (
    BoxBounds,
    Connectivity,
    InteriorPointResult,
    connectivity,
    interior_point_condition,
    is_acyclic,
    is_balanced,
)
from .scenario import Model
from .sim import RunReport, Trajectory

__all__ = [
    "Verdict",
    "CheckReport",
    "check_model",
    "format_check",
    "format_run",
    "write_csv",
    "fmt",
]


def fmt(value) -> str:
    """12 significant digits; booleans and None spelled out."""
    if value is None:
        return "none"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return "%.12g" % value


@dataclass
class Verdict:
    """Whether a convergence result applies; ``failing`` names every
    hypothesis that does not hold."""

    applicable: bool
    failing: tuple[str, ...] = ()
    note: str = ""

    @property
    def holds(self) -> bool:
        return self.applicable and not self.failing

    def text(self) -> str:
        if not self.applicable:
            return f"not applicable ({self.note})"
        if self.failing:
            return "hypotheses fail: " + "; ".join(self.failing)
        return "hypotheses hold" + (f" ({self.note})" if self.note else "")


@dataclass
class CheckReport:
    connectivity: Connectivity
    balanced: bool
    acyclic: bool
    mode: str
    matching: object  # MatchingResult
    interior: InteriorPointResult | None = None
    normalized_flips: tuple[int, ...] = ()
    straddling: tuple[int, ...] = ()
    common_open_interval: bool | None = None
    verdicts: dict[str, Verdict] = field(default_factory=dict)

    def conditions(self) -> dict[str, object]:
        """Short summary attached to run reports."""
        out = {
            "weakly_connected": self.connectivity.weakly_connected,
            "strongly_connected": self.connectivity.strongly_connected,
            "balanced": self.balanced,
            "matching": self.matching.matchable,
        }
        if self.interior is not None:
            out["interior_point"] = self.interior.holds
        return out


def _steady_translation(box: BoxBounds, matching) -> BoxBounds:
    """Shift the box so that the matched steady flow sits at the origin."""
    steady = -matching.v_bar  # B (steady flow) = -E d_bar
    return BoxBounds(box.lower - steady, box.upper - steady)


def check_model(model: Model) -> CheckReport:
    g, c = model.graph, model.controller
    conn = connectivity(g)
    balanced = is_balanced(g)
    acyclic = is_acyclic(g)
    mode = model.policy.mode
    d = model.d_bar if model.d_bar is not None else np.zeros(g.k)
    disturbed = bool(np.any(d))
    standard = c.is_standard

    matching = solve_matching(g, d, c.hc, model.box if mode == "box" else None)
    report = CheckReport(conn, balanced, acyclic, mode, matching)
    weak_fail = () if conn.weakly_connected else (f"weakly connected = false ({conn.component_count} components)",)

    # unconstrained PI: converges to load balancing iff weakly connected, given matching
    failing = list(weak_fail)
    if not matching.matchable:
        failing.append(f"matching condition: E d_bar is not in im B ({matching.diagnostic or 'no solution'})")
    # structural, so reported in every mode
    report.verdicts["pi_consensus"] = Verdict(True, tuple(failing),
                                              f"without saturation; scenario runs in {mode} mode"
                                              if mode != "unconstrained" else "")

    if mode == "box":
        box = model.box
        if disturbed and matching.matchable:
            box = _steady_translation(box, matching)
        norm = normalize_constraints(box, g)
        ng = norm.graph
        report.normalized_flips = tuple(sorted(norm.flipped))
        report.straddling = tuple(sorted(norm.straddling))
        report.common_open_interval = has_common_open_interval(norm.bounds)
        report.interior = interior_point_condition(g, box)

        common = []
        if not standard:
            common.append("unit gains and H_c = 1/2 |eta|^2 = false")
        if disturbed and not matching.matchable:
            common.append("constrained matching = false")
        strong = list(common)
        if report.straddling:
            strong.append(f"compatible orientation = false (edges {[j + 1 for j in report.straddling]} straddle 0)")
        both_zero = np.flatnonzero((norm.bounds.lower == 0) & (norm.bounds.upper == 0))
        if both_zero.size:
            strong.append(f"compatible orientation = false (edges {(both_zero + 1).tolist()} pinned at 0)")
        if not report.common_open_interval:
            strong.append("common open interval of the bounds = false")
        sc = connectivity(ng)
        if not sc.strongly_connected:
            strong.append("strongly connected = false")
        if not is_balanced(ng):
            strong.append("balanced = false")
        note = "checked on the reoriented bounds" if report.normalized_flips else ""
        report.verdicts["box_strongly_connected"] = Verdict(True, tuple(strong), note)

        interior = list(common) + list(weak_fail)
        if not report.interior.holds:
            interior.append(f"interior point condition = false ({report.interior.diagnostic})")
        report.verdicts["box_interior_point"] = Verdict(True, tuple(interior))
    else:
        report.verdicts["box_strongly_connected"] = Verdict(False, note=f"mode is {mode}")
        report.verdicts["box_interior_point"] = Verdict(False, note=f"mode is {mode}")

    if mode == "adaptive":
        lower = []
        if disturbed:
            lower.append("zero disturbance = false")
        gamma = model.hamiltonian.gamma
        if np.any(model.state.x < gamma):
            lower.append("x(0) >= gamma = false")
        note = "" if standard else "general gains or H_c: outside the established guarantee"
        report.verdicts["adaptive_lower_bound"] = Verdict(True, tuple(lower), note)
        report.verdicts["adaptive_consensus"] = Verdict(True, tuple(lower) + weak_fail, note)
    else:
        report.verdicts["adaptive_lower_bound"] = Verdict(False, note=f"mode is {mode}")
        report.verdicts["adaptive_consensus"] = Verdict(False, note=f"mode is {mode}")
    return report


def _edges(indices) -> str:
    return " ".join(str(j + 1) for j in indices) if len(indices) else "none"


def format_check(rep: CheckReport, header: dict[str, str] | None = None) -> str:
    header = {**(header or {}), "mode": rep.mode}
    lines = ["# check report"] + [f"{key} = {value}" for key, value in header.items()]
    c = rep.connectivity
    lines += [
        f"weakly_connected = {fmt(c.weakly_connected)}",
        f"strongly_connected = {fmt(c.strongly_connected)}",
        f"component_count = {c.component_count}",
        f"balanced = {fmt(rep.balanced)}",
        f"acyclic = {fmt(rep.acyclic)}",
        f"matching = {fmt(rep.matching.matchable)}",
        f"matching_residual = {fmt(rep.matching.residual)}",
    ]
    if rep.matching.matchable and rep.matching.eta_bar is not None:
        lines.append("matching_eta_bar = " + " ".join(fmt(v) for v in rep.matching.eta_bar))
        lines.append(f"matching_unique = {fmt(rep.matching.unique)}")
    if rep.interior is not None:
        ip = rep.interior
        lines += [
            f"interior_point = {fmt(ip.holds)}",
            f"interior_point_edges = {_edges(sorted(ip.active_edges))}",
            f"interior_point_margin = {fmt(ip.margin)}",
            f"interior_point_cap = {fmt(ip.cap)}",
        ]
        if ip.witness is not None:
            lines.append("interior_point_witness = " + " ".join(fmt(v) for v in ip.witness))
        if ip.diagnostic:
            lines.append(f"interior_point_diagnostic = {ip.diagnostic}")
        lines += [
            f"reoriented_edges = {_edges(rep.normalized_flips)}",
            f"straddling_edges = {_edges(rep.straddling)}",
            f"common_open_interval = {fmt(rep.common_open_interval)}",
        ]
    for name, verdict in rep.verdicts.items():
        lines.append(f"verdict.{name} = {verdict.text()}")
    return "\n".join(lines) + "\n"


def format_run(rep: RunReport, header: dict[str, str] | None = None) -> str:
    cons = rep.consensus
    lines = ["# run report"]
    for key, value in (header or {}).items():
        lines.append(f"{key} = {value}")
    lines += [
        f"status = {'pass' if rep.passed else 'fail'}",
        f"min_margin = {fmt(rep.min_margin)}",
        f"consensus_reached = {fmt(cons.reached)}",
        f"consensus_time = {fmt(cons.time)}",
        f"consensus_value = {fmt(cons.alpha)}",
        f"consensus_residual = {fmt(cons.residual)}",
        f"output_spread = {fmt(cons.spread)}",
        "component_values = " + " ".join(fmt(a) for a in cons.component_alphas),
        f"conservation_drift = {fmt(rep.conservation_drift)}",
        f"max_lyapunov_increment = {fmt(rep.max_lyapunov_increment)}",
        f"max_clamp_deficit = {fmt(rep.max_clamp_deficit)}",
        f"landing_events = {rep.events}",
        f"chattering_warnings = {rep.chattering}",
        f"shrinkage_flags = {rep.shrinkage_flags}",
    ]
    for name, (enabled, ok) in rep.monitors.items():
        lines.append(f"monitor.{name} = {('pass' if ok else 'fail') if enabled else 'disabled'}")
    for name, value in rep.conditions.items():
        lines.append(f"condition.{name} = {fmt(value)}")
    return "\n".join(lines) + "\n"


def write_csv(stream: io.TextIOBase, tr: Trajectory) -> None:
    """Columns: t, x_1..x_n, eta_1..eta_m, mu_sat_1..mu_sat_m, V, mass."""
    n, m = tr.x.shape[1], tr.eta.shape[1]
    header = ["t"] + [f"x_{i}" for i in range(1, n + 1)] + [f"eta_{j}" for j in range(1, m + 1)]
    header += [f"mu_sat_{j}" for j in range(1, m + 1)] + ["V", "mass"]
    stream.write(",".join(header) + "\n")
    for k in range(len(tr)):
        row = [tr.times[k], *tr.x[k], *tr.eta[k], *tr.mu_sat[k], tr.V[k], tr.mass[k]]
        stream.write(",".join("%.12g" % v for v in row) + "\n")

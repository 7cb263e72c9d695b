"""Command-line entry point.

    distflow run FILE [-o DIR] [--set section.key=value ...]
    distflow check FILE
    distflow qp-solve FILE
    distflow --batch DIR [-o DIR] [--jobs N]

Exit status: 0 all enabled monitors pass, 1 invariant violation,
2 parse or configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .adaptive import (
    ClassifierOptions,
    FlowProblemInfeasible,
    VertexClassification,
    classify,
    iterative_rescaling,
    solve_flow_qp,
)
from .graph import build_graph
from .report import check_model, fmt, format_check, format_run, write_csv
from .scenario import ScenarioError, _Section, _tokenize, apply_overrides, load_scenario
from .sim import SimulationError, integrate, summarize

EXIT_OK, EXIT_INVARIANT, EXIT_PARSE, EXIT_NUMERICAL = 0, 1, 2, 3
SCENARIO_SUFFIX = ".scn"

log = logging.getLogger("distflow")


def run_file(path, out_dir=".", overrides: list[str] | None = None, stream=None) -> int:
    """Simulate one scenario, write ``<name>.csv``, ``<name>.report`` and
    ``<name>.check`` to ``out_dir`` and return the exit status."""
    stream = stream or sys.stdout
    path = Path(path)
    try:
        items = apply_overrides(overrides or [])
        sc = load_scenario(path, items)
        model = sc.build()
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE

    header = {"scenario": sc.name or path.stem, "mode": model.policy.mode}
    header["overrides"] = " ".join(f"{k}={v}" for k, v in items.items()) if items else "none"
    check = check_model(model)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / (sc.name or path.stem)
    stem.with_suffix(".check").write_text(format_check(check, header))

    try:
        with np.errstate(over="raise", invalid="raise"):
            tr = integrate(model.graph, model.hamiltonian, model.controller, model.policy, model.state,
                           model.config, model.d_bar)
    except (SimulationError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    rep = summarize(model.graph, model.hamiltonian, model.controller, model.policy, tr, model.config,
                    model.d_bar, model.enabled, check.conditions())
    text = format_run(rep, header)
    stem.with_suffix(".report").write_text(text)
    with open(stem.with_suffix(".csv"), "w") as fh:
        write_csv(fh, tr)
    stream.write(text)
    return EXIT_OK if rep.passed else EXIT_INVARIANT


def check_file(path, overrides: list[str] | None = None, stream=None) -> int:
    stream = stream or sys.stdout
    try:
        items = apply_overrides(overrides or [])
        sc = load_scenario(path, items)
        model = sc.build()
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    stream.write(format_check(check_model(model), {"scenario": sc.name or Path(path).stem}))
    return EXIT_OK


def _read_instance(path: Path):
    """Graph plus flows for ``qp-solve``; the gray set comes from ``gray``,
    ``black`` (taken as the black set directly) or ``x``/``gamma``."""
    source = str(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read instance: {exc.strerror}", None, source) from None
    sections = _tokenize(text, source, ("graph", "flows"))
    if "graph" not in sections or "flows" not in sections:
        raise ScenarioError("instance needs [graph] and [flows] sections", None, source)
    gs = _Section("graph", sections["graph"], source, ("vertices", "edges"))
    fs = _Section("flows", sections["flows"], source,
                  ("mu", "gray", "black", "x", "gamma", "black2_closure", "gray_tolerance"))
    n = gs.number("vertices", None, int)
    if n is None or n < 1:
        raise ScenarioError("[graph] needs vertices >= 1", None, source)
    edges = gs.pairs("edges", "edge")
    for j, (tail, head) in enumerate(edges):
        if not (1 <= tail <= n and 1 <= head <= n) or tail == head:
            raise ScenarioError(f"edge {j + 1}: invalid pair ({tail}, {head}) for {n} vertices",
                                gs.pair_line("edges", j), source)
    g = build_graph([(t - 1, h - 1) for t, h in edges], n)
    mu = np.asarray(fs.floats("mu", None) or (), dtype=float)
    if mu.size != g.m:
        raise fs.error("mu", f"mu: expected {g.m} values, got {mu.size}")

    def vertex_list(key):
        vals = fs.floats(key, ())
        if any(v != int(v) or not 1 <= v <= n for v in vals):
            raise fs.error(key, f"{key}: expected vertex numbers in 1..{n}")
        return [int(v) - 1 for v in vals]

    opts = ClassifierOptions(gray_tolerance=fs.number("gray_tolerance", 1e-9),
                             black2_closure=fs.raw("black2_closure", "transitive"))
    if fs.has("black"):
        black = vertex_list("black")
        signed = g.B * mu
        cls = VertexClassification(
            frozenset(range(n)) - frozenset(black), frozenset(black), frozenset(black), frozenset(),
            tuple(frozenset(np.flatnonzero(signed[i] > 0).tolist()) for i in range(n)),
            tuple(frozenset(np.flatnonzero(signed[i] < 0).tolist()) for i in range(n)),
        )
    elif fs.has("gray"):
        cls = classify(g, None, None, mu, opts, gray=vertex_list("gray"))
    elif fs.has("x"):
        x = np.asarray(fs.floats("x", ()), dtype=float)
        gamma = np.asarray(fs.floats("gamma", (0.0,)), dtype=float)
        gamma = np.full(n, gamma[0]) if gamma.size == 1 else gamma
        if x.size != n or gamma.size != n:
            raise fs.error("x", f"x and gamma need {n} values")
        cls = classify(g, x, gamma, mu, opts)
    else:
        raise ScenarioError("[flows] needs one of gray, black or x", None, source)
    return g, mu, cls


def qp_solve_file(path, stream=None) -> int:
    stream = stream or sys.stdout
    try:
        g, mu, cls = _read_instance(Path(path))
    except (ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE

    def one_based(items):
        return " ".join(str(i + 1) for i in sorted(items)) or "none"

    out = [f"black1 = {one_based(cls.black1)}", f"black2 = {one_based(cls.black2)}",
           f"free_edges = {one_based(cls.e_b_out)}"]
    if not cls.black or not cls.e_b_out:
        out.append("black set is empty or has no out-flow: flows are unconstrained (phi_plus = inf)")
        stream.write("\n".join(out) + "\n")
        return EXIT_OK
    try:
        qp = solve_flow_qp(g, mu, cls)
    except FlowProblemInfeasible as exc:
        out.append(f"qp = infeasible ({exc})")
        stream.write("\n".join(out) + "\n")
        return EXIT_NUMERICAL
    it = iterative_rescaling(g, mu, cls)
    free = list(qp.free_edges)
    deviation = float(np.max(np.abs(qp.phi_star[free] - it.phi[free])))
    out += [
        "phi_star = " + " ".join(fmt(v) for v in qp.phi_star),
        "phi_plus = " + " ".join(fmt(v) for v in qp.phi_plus),
        f"kkt_residual = {fmt(qp.kkt_residual)}",
        f"balance_residual = {fmt(qp.balance_residual)}",
        "shrinkage_violations = " + (" ".join(str(j + 1) for j in qp.shrinkage_violations(mu)) or "none"),
        "iterative_phi = " + " ".join(fmt(v) for v in it.phi),
        f"iterative_sweeps = {it.iterations}",
        f"iterative_converged = {fmt(it.converged)}",
        f"iterative_defect = {fmt(it.defect)}",
        f"max_deviation = {fmt(deviation)}",
    ]
    stream.write("\n".join(out) + "\n")
    return EXIT_OK


def _batch_one(args):
    path, out_dir = args
    buf = io.StringIO()
    code = run_file(path, Path(out_dir) / Path(path).stem, [], buf)
    return str(path), code


def run_batch(directory, out_dir, jobs: int | None = None, stream=None) -> int:
    """Run every ``*.scn`` file in ``directory`` in separate processes;
    the status is the worst individual status."""
    stream = stream or sys.stdout
    files = sorted(Path(directory).glob(f"*{SCENARIO_SUFFIX}"))
    if not files:
        print(f"error: no {SCENARIO_SUFFIX} files in {directory}", file=sys.stderr)
        return EXIT_PARSE
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(_batch_one, [(f, out_dir) for f in files]))
    for path, code in results:
        stream.write(f"{path}: exit {code}\n")
    return max(code for _, code in results)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distflow", description="Distribution networks under PI flow control.")
    p.add_argument("--batch", metavar="DIR", help="run every scenario file in DIR in parallel")
    p.add_argument("-o", "--out", default=".", help="output directory (batch mode)")
    p.add_argument("--jobs", type=int, default=None, help="worker processes for --batch")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    r = sub.add_parser("run", help="simulate a scenario and write trajectory and reports")
    r.add_argument("file")
    r.add_argument("-o", "--out", dest="run_out", default=".", help="output directory")
    r.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a scenario entry (repeatable)")

    c = sub.add_parser("check", help="structural checks only, no simulation")
    c.add_argument("file")
    c.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")

    q = sub.add_parser("qp-solve", help="solve the flow-bound problem for one instance")
    q.add_argument("file")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.batch:
        return run_batch(args.batch, args.out, args.jobs)
    if args.command == "run":
        return run_file(args.file, args.run_out, args.set)
    if args.command == "check":
        return check_file(args.file, args.set)
    if args.command == "qp-solve":
        return qp_solve_file(args.file)
    parser.print_help()
    return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())

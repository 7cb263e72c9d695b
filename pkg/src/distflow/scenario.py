"""Plain-text scenario files.

A scenario is a sequence of ``[section]`` headers followed by ``key = value``
lines. ``#`` starts a comment. A line that begins with whitespace continues
the value of the previous key, so long edge lists can span several lines.
List values are whitespace separated; edge and terminal lists separate their
pairs with ``;`` (or a line break). Vertices and edges are numbered from 1.

Example::

    [graph]
    vertices = 3
    edges = 1 2; 2 3
    terminals = 1 +1; 3 -1

    [hamiltonian]
    form = quadratic        # quadratic | power | hydraulic
    weight = 1
    gamma = 0

    [controller]
    mode = unconstrained    # unconstrained | box | adaptive
    gains = 1
    disturbance = 0.5

    [initial]
    x = 1 0 2
    eta = 0 0

    [sim]
    t_end = 10
    monitors = auto

Per-vertex and per-edge parameters accept a single value, which is broadcast.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptive import ClassifierOptions
from .controller import ConfigurationError, ConstraintPolicy, PIController, SystemState
from .graph import BoxBounds, GraphError, NetworkGraph, build_graph
from .hamiltonian import (
    ControllerHamiltonian,
    HydraulicParams,
    VertexHamiltonian,
    even_power,
    hydraulic,
    quadratic,
)
from .sim import SimConfig

__all__ = [
    "ScenarioError",
    "GraphSpec",
    "HamiltonianSpec",
    "ControllerSpec",
    "InitialSpec",
    "Scenario",
    "Model",
    "MONITORS",
    "parse_scenario",
    "load_scenario",
    "apply_overrides",
]

MONITORS = ("lower_bound", "conservation", "lyapunov", "consensus")
FORMS = ("quadratic", "power", "hydraulic")
SECTIONS = ("graph", "hamiltonian", "controller", "initial", "sim", "classifier")


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario; carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None, source: str = "<scenario>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class GraphSpec:
    vertices: int
    edges: tuple[tuple[int, int], ...]
    terminals: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class HamiltonianSpec:
    form: str = "quadratic"
    weight: tuple[float, ...] = (1.0,)
    gamma: tuple[float, ...] = (0.0,)
    power: tuple[int, ...] = (1,)
    area: tuple[float, ...] = (1.0,)
    rho: float = 1.0
    g: float = 9.81
    ref_height: tuple[float, ...] = (0.0,)


@dataclass(frozen=True)
class ControllerSpec:
    mode: str = "unconstrained"
    gains: tuple[float, ...] = (1.0,)
    hc_weights: tuple[float, ...] = (1.0,)
    lower: tuple[float, ...] = (-math.inf,)
    upper: tuple[float, ...] = (math.inf,)
    disturbance: tuple[float, ...] = ()
    general_hc: bool = False


@dataclass(frozen=True)
class InitialSpec:
    x: tuple[float, ...]
    eta: tuple[float, ...] = (0.0,)


@dataclass(frozen=True)
class Scenario:
    graph: GraphSpec
    hamiltonian: HamiltonianSpec
    controller: ControllerSpec
    initial: InitialSpec
    sim: SimConfig = field(default_factory=SimConfig)
    classifier: ClassifierOptions = field(default_factory=ClassifierOptions)
    monitors: tuple[str, ...] | None = None  # None means chosen from the policy
    name: str = field(default="", compare=False)

    def to_text(self) -> str:
        return _serialize(self)

    def build(self) -> "Model":
        return _build(self)


@dataclass
class Model:
    """Numerical objects assembled from a scenario."""

    graph: NetworkGraph
    hamiltonian: VertexHamiltonian
    controller: PIController
    policy: ConstraintPolicy
    state: SystemState
    config: SimConfig
    d_bar: np.ndarray | None
    box: BoxBounds | None
    enabled: dict[str, bool] | None


# ---------------------------------------------------------------- parsing


@dataclass
class _Entry:
    value: str
    line: int


def _tokenize(text: str, source: str, known: tuple[str, ...] = SECTIONS) -> dict[str, dict[str, _Entry]]:
    sections: dict[str, dict[str, _Entry]] = {}
    current: dict[str, _Entry] | None = None
    last: _Entry | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].rstrip()
        if not body.strip():
            continue
        if body[0] in " \t" and last is not None:
            last.value += "\n" + body.strip()
            continue
        body = body.strip()
        if body.startswith("["):
            if not body.endswith("]"):
                raise ScenarioError(f"unterminated section header {body!r}", lineno, source)
            name = body[1:-1].strip().lower()
            if name not in known:
                raise ScenarioError(f"unknown section [{name}]; expected one of {', '.join(known)}", lineno, source)
            if name in sections:
                raise ScenarioError(f"section [{name}] appears twice", lineno, source)
            current = sections[name] = {}
            last = None
            continue
        if "=" not in body:
            raise ScenarioError(f"expected 'key = value', got {body!r}", lineno, source)
        if current is None:
            raise ScenarioError("key outside of any section", lineno, source)
        key, value = (part.strip() for part in body.split("=", 1))
        key = key.lower()
        if key in current:
            raise ScenarioError(f"duplicate key {key!r}", lineno, source)
        last = current[key] = _Entry(value, lineno)
    return sections


class _Section:
    """Typed access to one section's entries; unknown keys are errors."""

    def __init__(self, name, entries, source, allowed):
        self.name, self.entries, self.source = name, entries, source
        for key, entry in entries.items():
            if key not in allowed:
                raise ScenarioError(f"unknown key {key!r} in [{name}]; allowed: {', '.join(allowed)}",
                                    entry.line, source)

    def error(self, key, message):
        entry = self.entries.get(key)
        return ScenarioError(message, entry.line if entry else None, self.source)

    def has(self, key):
        return key in self.entries

    def raw(self, key, default=None):
        return self.entries[key].value if key in self.entries else default

    def require(self, key):
        if key not in self.entries:
            raise ScenarioError(f"[{self.name}] is missing required key {key!r}", None, self.source)
        return self.entries[key].value

    def floats(self, key, default):
        if key not in self.entries:
            return default
        try:
            return tuple(float(tok) for tok in self.entries[key].value.replace(",", " ").split())
        except ValueError:
            raise self.error(key, f"{key}: expected numbers, got {self.entries[key].value!r}") from None

    def number(self, key, default, kind=float):
        if key not in self.entries:
            return default
        try:
            return kind(self.entries[key].value)
        except ValueError:
            raise self.error(key, f"{key}: expected a single {kind.__name__}, "
                                  f"got {self.entries[key].value!r}") from None

    def flag(self, key, default):
        if key not in self.entries:
            return default
        value = self.entries[key].value.lower()
        if value in ("true", "yes", "on", "1"):
            return True
        if value in ("false", "no", "off", "0"):
            return False
        raise self.error(key, f"{key}: expected true/false, got {value!r}")

    def pairs(self, key, what):
        """Pairs separated by ';' or line breaks, reported with their own line."""
        if key not in self.entries:
            return ()
        entry = self.entries[key]
        out = []
        for offset, text_line in enumerate(entry.value.split("\n")):
            for chunk in text_line.split(";"):
                if not chunk.strip():
                    continue
                toks = chunk.split()
                try:
                    if len(toks) != 2:
                        raise ValueError
                    out.append((int(toks[0]), int(toks[1])))
                except ValueError:
                    raise ScenarioError(f"{what} {len(out) + 1}: expected two integers, got {chunk.strip()!r}",
                                        entry.line + offset, self.source) from None
        return tuple(out)

    def pair_line(self, key, index):
        """Line on which the ``index``-th pair of ``key`` sits."""
        entry = self.entries[key]
        count = 0
        for offset, text_line in enumerate(entry.value.split("\n")):
            count += sum(1 for chunk in text_line.split(";") if chunk.strip())
            if count > index:
                return entry.line + offset
        return entry.line


def _check_length(sec: _Section, key: str, values: tuple, n: int, what: str):
    if len(values) not in (1, n):
        raise sec.error(key, f"{key}: expected 1 or {n} values (one per {what}), got {len(values)}")


def parse_scenario(text: str, source: str = "<scenario>", overrides: dict[str, str] | None = None) -> Scenario:
    """Parse scenario text; ``overrides`` maps ``section.key`` to a raw value
    and is applied after the file."""
    sections = _tokenize(text, source)
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ScenarioError(f"override {dotted!r} must look like section.key", None, source)
        name, key = dotted.split(".", 1)
        name, key = name.strip().lower(), key.strip().lower()
        if name not in SECTIONS:
            raise ScenarioError(f"override {dotted!r}: unknown section [{name}]", None, source)
        line = sections.get(name, {}).get(key, _Entry("", None)).line
        sections.setdefault(name, {})[key] = _Entry(value, line)
    for name in ("graph", "hamiltonian", "initial"):
        if name not in sections:
            raise ScenarioError(f"missing required section [{name}]", None, source)

    def section(name, allowed):
        return _Section(name, sections.get(name, {}), source, allowed)

    # graph
    gs = section("graph", ("vertices", "edges", "terminals"))
    n = gs.number("vertices", None, int)
    if n is None:
        raise ScenarioError("[graph] is missing required key 'vertices'", None, source)
    if n < 1:
        raise gs.error("vertices", f"vertices must be >= 1, got {n}")
    edges = gs.pairs("edges", "edge")
    for j, (tail, head) in enumerate(edges):
        for v in (tail, head):
            if not 1 <= v <= n:
                raise ScenarioError(f"edge {j + 1}: vertex {v} out of range 1..{n}", gs.pair_line("edges", j), source)
        if tail == head:
            raise ScenarioError(f"edge {j + 1}: self-loop at vertex {tail}", gs.pair_line("edges", j), source)
    terminals = gs.pairs("terminals", "terminal")
    for c, (vertex, sign) in enumerate(terminals):
        line = gs.pair_line("terminals", c)
        if not 1 <= vertex <= n:
            raise ScenarioError(f"terminal {c + 1}: vertex {vertex} out of range 1..{n}", line, source)
        if sign not in (-1, 1):
            raise ScenarioError(f"terminal {c + 1}: sign must be +1 or -1, got {sign}", line, source)
    graph = GraphSpec(n, edges, terminals)
    m, k = len(edges), len(terminals)

    # hamiltonian
    hs = section("hamiltonian", ("form", "weight", "gamma", "power", "area", "rho", "g", "ref_height"))
    form = hs.raw("form", "quadratic").lower()
    if form not in FORMS:
        hint = " (only separable storage functions are supported)" if "separable" in form else ""
        raise hs.error("form", f"form must be one of {', '.join(FORMS)}, got {form!r}{hint}")
    ham = HamiltonianSpec(
        form=form,
        weight=hs.floats("weight", (1.0,)),
        gamma=hs.floats("gamma", (0.0,)),
        power=tuple(int(p) for p in hs.floats("power", (1.0,))),  # checked integral below
        area=hs.floats("area", (1.0,)),
        rho=hs.number("rho", 1.0),
        g=hs.number("g", 9.81),
        ref_height=hs.floats("ref_height", (0.0,)),
    )
    if any(p != int(p) for p in hs.floats("power", (1.0,))):
        raise hs.error("power", "power must be an integer exponent p (the storage grows like |x|^(2p))")
    for key in ("weight", "gamma", "power", "area", "ref_height"):
        _check_length(hs, key, getattr(ham, key), n, "vertex")
    if form != "power" and hs.has("power"):
        raise hs.error("power", "power is only meaningful with form = power")
    if form == "hydraulic" and (hs.has("weight") or hs.has("gamma")):
        raise hs.error("weight" if hs.has("weight") else "gamma",
                       "hydraulic form derives weight and gamma from area, rho, g and ref_height")

    # controller
    cs = section("controller", ("mode", "gains", "hc_weights", "lower", "upper", "disturbance", "general_hc"))
    mode = cs.raw("mode", "unconstrained").lower()
    if mode == "constant_box":
        mode = "box"
    ctrl = ControllerSpec(
        mode=mode,
        gains=cs.floats("gains", (1.0,)),
        hc_weights=cs.floats("hc_weights", (1.0,)),
        lower=cs.floats("lower", (-math.inf,)),
        upper=cs.floats("upper", (math.inf,)),
        disturbance=cs.floats("disturbance", ()),
        general_hc=cs.flag("general_hc", False),
    )
    if mode not in ("unconstrained", "box", "adaptive"):
        raise cs.error("mode", f"mode must be unconstrained, box or adaptive, got {mode!r}")
    for key in ("gains", "hc_weights", "lower", "upper"):
        _check_length(cs, key, getattr(ctrl, key), max(m, 1), "edge")
    if len(ctrl.disturbance) not in (0, k):
        raise cs.error("disturbance", f"disturbance: expected {k} values (one per terminal), got {len(ctrl.disturbance)}")
    if mode != "box" and (cs.has("lower") or cs.has("upper")):
        raise cs.error("lower" if cs.has("lower") else "upper", "flow bounds are only used with mode = box")
    if mode == "adaptive" and any(ctrl.disturbance):
        raise cs.error("disturbance", "adaptive bounds are only defined without in/outflows; set the disturbance to 0")
    if mode == "adaptive" and not ctrl.general_hc and (set(ctrl.gains) != {1.0} or set(ctrl.hc_weights) != {1.0}):
        raise cs.error("gains" if set(ctrl.gains) != {1.0} else "hc_weights",
                       "adaptive bounds are established for unit gains and H_c = 1/2 |eta|^2; "
                       "set general_hc = true to run outside that guarantee")

    # initial state
    ins = section("initial", ("x", "eta"))
    init = InitialSpec(ins.floats("x", None) or (), ins.floats("eta", (0.0,)))
    if not ins.has("x"):
        raise ScenarioError("[initial] is missing required key 'x'", None, source)
    _check_length(ins, "x", init.x, n, "vertex")
    _check_length(ins, "eta", init.eta, max(m, 1), "edge")

    # sim
    sim_keys = tuple(f.name for f in dataclasses.fields(SimConfig)) + ("monitors",)
    ss = section("sim", sim_keys)
    kwargs = {}
    for f in dataclasses.fields(SimConfig):
        if not ss.has(f.name):
            continue
        if f.type in ("bool", bool):
            kwargs[f.name] = ss.flag(f.name, f.default)
        elif f.type in ("int", int):
            kwargs[f.name] = ss.number(f.name, f.default, int)
        elif f.type in ("float", float):
            kwargs[f.name] = ss.number(f.name, f.default, float)
        else:
            kwargs[f.name] = ss.raw(f.name)
    try:
        cfg = SimConfig(**kwargs)
    except ConfigurationError as exc:
        raise ScenarioError(f"[sim] {exc}", None, source) from None
    monitors = None
    raw = ss.raw("monitors", "auto").replace(",", " ").split()
    if raw != ["auto"]:
        unknown = [name for name in raw if name not in MONITORS]
        if unknown:
            raise ss.error("monitors", f"unknown monitors {unknown}; choose from {', '.join(MONITORS)} or 'auto'")
        monitors = tuple(dict.fromkeys(raw))

    # classifier
    cls_keys = tuple(f.name for f in dataclasses.fields(ClassifierOptions))
    ks = section("classifier", cls_keys)
    ckw = {}
    for key in cls_keys:
        if ks.has(key):
            ckw[key] = ks.number(key, None) if key == "gray_tolerance" else ks.raw(key)
    try:
        opts = ClassifierOptions(**ckw)
    except ValueError as exc:
        raise ScenarioError(f"[classifier] {exc}", None, source) from None

    scenario = Scenario(graph, ham, ctrl, init, cfg, opts, monitors, Path(source).stem if source else "")
    # dimensional and physical checks that need the assembled objects
    try:
        model = scenario.build()
    except (ConfigurationError, GraphError, ValueError) as exc:
        raise ScenarioError(str(exc), None, source) from None
    if mode == "adaptive":
        gamma = model.hamiltonian.gamma
        slack = np.maximum(opts.gray_tolerance, opts.gray_tolerance * np.abs(gamma))
        below = np.flatnonzero(model.state.x < gamma - slack)
        if below.size:
            raise ins.error("x", f"adaptive mode needs x(0) >= gamma; violated at vertices {(below + 1).tolist()}")
    return scenario


def load_scenario(path, overrides: dict[str, str] | None = None) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", None, str(path)) from None
    return parse_scenario(text, str(path), overrides)


def apply_overrides(items: list[str]) -> dict[str, str]:
    """``['sim.t_end=5', ...]`` -> ``{'sim.t_end': '5'}``, keeping order."""
    out: dict[str, str] = {}
    for item in items:
        if "=" not in item:
            raise ScenarioError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------- building


def _broadcast(values, size):
    arr = np.asarray(values, dtype=float)
    return np.full(size, arr[0]) if arr.size == 1 else arr


def _build(sc: Scenario) -> Model:
    gs = sc.graph
    g = build_graph([(t - 1, h - 1) for t, h in gs.edges], gs.vertices, [(v - 1, s) for v, s in gs.terminals])
    n, m = g.n, g.m
    hs = sc.hamiltonian
    if hs.form == "hydraulic":
        h = hydraulic(HydraulicParams(_broadcast(hs.area, n), hs.rho, hs.g, _broadcast(hs.ref_height, n)))
    elif hs.form == "power":
        h = even_power(_broadcast(hs.weight, n), _broadcast(hs.gamma, n), _broadcast(hs.power, n).astype(int), n)
    else:
        h = quadratic(_broadcast(hs.weight, n), _broadcast(hs.gamma, n), n)

    cs = sc.controller
    hc = ControllerHamiltonian(_broadcast(cs.hc_weights, m))
    c = PIController(_broadcast(cs.gains, m), hc)
    box = BoxBounds(_broadcast(cs.lower, m), _broadcast(cs.upper, m)) if cs.mode == "box" else None
    policy = ConstraintPolicy(cs.mode, box, sc.classifier if cs.mode == "adaptive" else None)
    state = SystemState(_broadcast(sc.initial.x, n), _broadcast(sc.initial.eta, m))
    d_bar = np.asarray(cs.disturbance, dtype=float) if cs.disturbance else (np.zeros(g.k) if g.k else None)
    enabled = None if sc.monitors is None else {name: name in sc.monitors for name in MONITORS}
    return Model(g, h, c, policy, state, sc.sim, d_bar, box, enabled)


# ---------------------------------------------------------------- writing


def _num(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    value = float(value)
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def _list(values) -> str:
    return " ".join(_num(v) for v in values)


def _pairs(pairs) -> str:
    return "; ".join(f"{a} {b}" for a, b in pairs)


def _serialize(sc: Scenario) -> str:
    lines = [f"# scenario {sc.name}" if sc.name else "# scenario", "", "[graph]",
             f"vertices = {sc.graph.vertices}"]
    if sc.graph.edges:
        lines.append(f"edges = {_pairs(sc.graph.edges)}")
    if sc.graph.terminals:
        lines.append("terminals = " + "; ".join(f"{v} {s:+d}" for v, s in sc.graph.terminals))

    hs = sc.hamiltonian
    lines += ["", "[hamiltonian]", f"form = {hs.form}"]
    if hs.form == "hydraulic":
        lines += [f"area = {_list(hs.area)}", f"rho = {_num(hs.rho)}", f"g = {_num(hs.g)}",
                  f"ref_height = {_list(hs.ref_height)}"]
    else:
        lines += [f"weight = {_list(hs.weight)}", f"gamma = {_list(hs.gamma)}"]
        if hs.form == "power":
            lines.append(f"power = {_list(hs.power)}")

    cs = sc.controller
    lines += ["", "[controller]", f"mode = {cs.mode}", f"gains = {_list(cs.gains)}",
              f"hc_weights = {_list(cs.hc_weights)}"]
    if cs.mode == "box":
        lines += [f"lower = {_list(cs.lower)}", f"upper = {_list(cs.upper)}"]
    if cs.disturbance:
        lines.append(f"disturbance = {_list(cs.disturbance)}")
    if cs.general_hc:
        lines.append("general_hc = true")

    lines += ["", "[initial]", f"x = {_list(sc.initial.x)}", f"eta = {_list(sc.initial.eta)}", "", "[sim]"]
    for f in dataclasses.fields(SimConfig):
        value = getattr(sc.sim, f.name)
        text = ("true" if value else "false") if isinstance(value, bool) else \
            value if isinstance(value, str) else _num(value)
        lines.append(f"{f.name} = {text}")
    lines.append("monitors = " + (" ".join(sc.monitors) if sc.monitors is not None else "auto"))

    lines += ["", "[classifier]"]
    for f in dataclasses.fields(ClassifierOptions):
        value = getattr(sc.classifier, f.name)
        lines.append(f"{f.name} = {value if isinstance(value, str) else _num(value)}")
    return "\n".join(lines) + "\n"

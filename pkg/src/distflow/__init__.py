"""Dynamical distribution networks on directed graphs under PI flow control,
with state-dependent flow bounds that keep every storage above its lower
bound."""

from .adaptive import (
    AdaptiveBounds,
    ClassifierOptions,
    FlowProblemInfeasible,
    VertexClassification,
    classify,
    compute_bounds,
    iterative_rescaling,
    solve_flow_qp,
)
from .controller import (
    ConfigurationError,
    ConstraintPolicy,
    PIController,
    SystemState,
    closed_loop_rhs,
    controller_output,
    normalize_constraints,
    saturate,
    solve_matching,
)
from .graph import (
    BoxBounds,
    GraphError,
    NetworkGraph,
    build_graph,
    connectivity,
    interior_point_condition,
    is_acyclic,
    is_balanced,
)
from .hamiltonian import (
    ControllerHamiltonian,
    HydraulicParams,
    VertexHamiltonian,
    bregman_shift,
    even_power,
    hydraulic,
    quadratic,
    shifted_storage,
    total_energy,
)
from .scenario import Scenario, ScenarioError, load_scenario, parse_scenario
from .sim import SimConfig, SimulationError, Trajectory, detect_consensus, integrate, summarize

__version__ = "0.1.0"

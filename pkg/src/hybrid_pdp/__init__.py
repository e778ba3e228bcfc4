"""Piecewise deterministic simulation of coupled classical-quantum systems.

Sample paths of a hybrid system (a classical sector label plus a quantum
state vector) are generated exactly: the quantum part follows a damped
Schroedinger flow between jumps, and jumps happen at the time the flow's
norm decays to a uniform random level.  Ensemble averages can be checked
against a direct integration of the block master equation.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .applications import (
    ClassicalHistory,
    FluorescenceParams,
    build_fluorescence,
    build_telegraph,
    closed_form_propagator,
    discriminate_initial_state,
    next_jump_distribution,
    photon_count_probs,
    waiting_time_density,
)
from .engine import (
    EventLog,
    EventRecord,
    TrajectoryConfig,
    apply_jump,
    cumulative_rate,
    flow,
    jump_distribution,
    sample_jump_time,
    simulate_trajectory,
)
from .ensemble import (
    EnsembleStats,
    TimeGrid,
    compare_to_master,
    master_evolve,
    prop41_residual,
    run_ensemble,
)
from .errors import (
    DimensionError,
    HybridPDPError,
    InconsistentHistoryError,
    InvalidJumpError,
    NumericalError,
    PreconditionError,
    StiffnessError,
    SurvivalUnderflowError,
    ValidationError,
    ZeroRateError,
)
from .model import (
    BlockDensityMatrix,
    HybridModel,
    PureHybridState,
    build_chain_model,
    build_model,
    lindblad_apply,
    random_model,
)
from .serialization import parse_model, serialize_model

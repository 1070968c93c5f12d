"""Federated optimization under arbitrary client participation."""

from .algorithms import (
    FEDSUM_FAMILY,
    ROUND_ENGINES,
    ClientState,
    HyperParams,
    RoundReport,
    ServerState,
    reconstruct_y_direct,
    run_round_fedavg,
    run_round_fedsum,
    run_round_fedsum_b,
    run_round_fedsum_cr,
    run_round_scaffold,
)
from .errors import ConfigError, DivergenceError
from .metrics import CommLedger, TraceRow, emit_trace, read_trace
from .participation import (
    ActiveSet,
    BiasedTiers,
    DelayTracker,
    DeterministicCyclic,
    IndependentProb,
    Replay,
    ReshuffledCyclic,
    SineProb,
    UniformSample,
    generate_schedule,
    next_active_set,
)
from .problems import (
    GlobalObjective,
    LogisticClient,
    QuadraticClient,
    dirichlet_partition,
    make_quadratic_ensemble,
    quadratic_objective,
)
from .simulation import Simulation
from .streams import Streams

__version__ = "0.1.0"

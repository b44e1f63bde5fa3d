"""timegrit: multilevel-in-time solver with self-consistent period closure.

The package solves time-stepping problems by coarsening the time grid,
relaxing on the fine grid, and correcting from coarse solves (a multigrid
reduction across time). A periodic mode closes the loop u(0) = u(T) while
iterations are still in flight: the worker owning the end of the domain
mails fresh estimates of u(T) to the worker owning the start, on a fixed
deposit/consume schedule that can never deadlock.

Entry points:
  - build_hierarchy / Hierarchy: time-grid coarsening structure
  - LinearOdeApp, Heat1dApp, NonlinearOdeApp: bundled applications
  - SolverConfig + solve: the solver
  - PeriodicConfig + solve_periodic: the periodic variant
  - ExecutorConfig, run, measure: execution control (serial or threads)
  - sequential_solve, f_relax, c_relax, fcf_relax, compute_residual,
    fas_restrict, interpolate_and_correct, vcycle: single ops for tests
    and experiments
"""

from .app import (
    Application,
    RunReport,
    SpaceTimeState,
    initialize_state,
    pulsatile_waveform,
    state_distance,
)
from .backends import (
    CycleTrace,
    Heat1dApp,
    LinearOdeApp,
    NonlinearOdeApp,
    cycle_map_spectral_radius,
    cycle_time_grid,
    periodic_fixed_point,
    propagate_cycle,
    sequential_cycles,
)
from .errors import ConfigError, HierarchyError, OracleError, ProtocolError, StepError
from .executors import (
    BoundaryMessage,
    ExecutorConfig,
    MeasureResult,
    measure,
    run,
)
from .grid import (
    Hierarchy,
    LevelSpec,
    OwnershipMap,
    build_hierarchy,
    is_cpoint,
    partition,
)
from .kernels import active_backend_name, get_backend
from .mgrit import (
    SolverConfig,
    build_runtimes,
    c_relax,
    compute_residual,
    f_relax,
    fas_restrict,
    fcf_relax,
    interpolate_and_correct,
    relax_level,
    residual_norm,
    sequential_solve,
    solve,
    vcycle,
)
from .periodic import (
    Message,
    PeriodicConfig,
    PeriodicController,
    PeriodicStatus,
    UpdateMailbox,
    jump_norm,
    solve_periodic,
)

__version__ = "0.1.0"

__all__ = [
    "Application",
    "BoundaryMessage",
    "ConfigError",
    "CycleTrace",
    "ExecutorConfig",
    "Heat1dApp",
    "Hierarchy",
    "HierarchyError",
    "LevelSpec",
    "LinearOdeApp",
    "MeasureResult",
    "Message",
    "NonlinearOdeApp",
    "OracleError",
    "OwnershipMap",
    "PeriodicConfig",
    "PeriodicController",
    "PeriodicStatus",
    "ProtocolError",
    "RunReport",
    "SolverConfig",
    "SpaceTimeState",
    "StepError",
    "UpdateMailbox",
    "active_backend_name",
    "build_hierarchy",
    "build_runtimes",
    "c_relax",
    "compute_residual",
    "cycle_map_spectral_radius",
    "cycle_time_grid",
    "f_relax",
    "fas_restrict",
    "fcf_relax",
    "get_backend",
    "initialize_state",
    "interpolate_and_correct",
    "is_cpoint",
    "jump_norm",
    "measure",
    "partition",
    "periodic_fixed_point",
    "propagate_cycle",
    "pulsatile_waveform",
    "relax_level",
    "residual_norm",
    "run",
    "sequential_cycles",
    "sequential_solve",
    "solve",
    "solve_periodic",
    "state_distance",
    "vcycle",
]

"""Application contract and space-time state containers.

A state vector is a plain 1-D float64 ndarray. An Application supplies the
time stepper and the small amount of vector algebra the solvers need; the
solver engine never looks inside the vectors.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import StepError
from .grid import LevelSpec


class Application(ABC):
    """Problem-specific time stepping behind a uniform interface.

    step() advances one state vector across [t_start, t_stop] on the given
    level and must be deterministic: identical inputs give identical bytes.
    """

    @abstractmethod
    def dimension(self) -> int:
        """Length of the state vectors."""

    @abstractmethod
    def init(self, t: float) -> np.ndarray:
        """Initial guess for the state at time t."""

    @abstractmethod
    def step(self, u: np.ndarray, t_start: float, t_stop: float, level: int) -> np.ndarray:
        """Advance u from t_start to t_stop with the level's discretization."""

    def spatial_norm(self, u: np.ndarray) -> float:
        return math.sqrt(float(np.dot(u, u)))

    def linear_combine(self, a: float, u: np.ndarray, b: float, v: np.ndarray) -> np.ndarray:
        return a * u + b * v

    def analytic(self, t: float) -> np.ndarray | None:
        """Closed-form solution when one exists; None otherwise."""
        return None

    def make_stepper(self, level: int, dt: float, backend):
        """Fresh step kernel for (level, dt) built from the given kernel
        backend, or None to make the engine fall back to per-step calls of
        self.step. Called once per worker per level, from the setup thread."""
        return None

    def prepare(self, hierarchy) -> None:
        """Build any per-level caches eagerly (called once before workers start)."""


@dataclass
class SpaceTimeState:
    """All time-point vectors of one level, plus FAS payload on coarse levels."""

    level: int
    dt: float
    values: np.ndarray  # shape (num_points, nx), C-contiguous
    fas_rhs: np.ndarray | None = None  # same shape; present iff level > 0
    restricted_guess: np.ndarray | None = None  # injected fine guess, level > 0

    @property
    def num_points(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "SpaceTimeState":
        return SpaceTimeState(
            level=self.level,
            dt=self.dt,
            values=self.values.copy(),
            fas_rhs=None if self.fas_rhs is None else self.fas_rhs.copy(),
            restricted_guess=None
            if self.restricted_guess is None
            else self.restricted_guess.copy(),
        )


def initialize_state(app: Application, spec: LevelSpec, mode: str = "from_init") -> SpaceTimeState:
    """Allocate a level state.

    mode "from_init" fills every point with app.init(t_n), "zero" with zeros,
    "from_coarse_solve" only allocates (the solver fills it).
    """
    if mode not in ("from_init", "zero", "from_coarse_solve"):
        raise ValueError(f"unknown initialization mode {mode!r}")
    nx = app.dimension()
    values = np.zeros((spec.num_points, nx), dtype=np.float64)
    if mode == "from_init":
        for n in range(spec.num_points):
            u = np.asarray(app.init(n * spec.dt), dtype=np.float64)
            if u.shape != (nx,):
                raise StepError(
                    f"init returned shape {u.shape}, expected ({nx},) at time index {n}"
                )
            values[n] = u
    fas = np.zeros_like(values) if spec.level > 0 else None
    guess = np.zeros_like(values) if spec.level > 0 else None
    return SpaceTimeState(
        level=spec.level, dt=spec.dt, values=values, fas_rhs=fas, restricted_guess=guess
    )


def state_distance(a: SpaceTimeState, b: SpaceTimeState, app: Application) -> float:
    """Discrete space-time L2 distance, left-endpoint quadrature in time."""
    if a.level != b.level or a.values.shape != b.values.shape:
        raise ValueError(
            f"states incompatible: level {a.level}/{b.level}, "
            f"shapes {a.values.shape}/{b.values.shape}"
        )
    total = 0.0
    for n in range(a.num_points - 1):
        d = app.spatial_norm(a.values[n] - b.values[n])
        total += a.dt * d * d
    return math.sqrt(total)


@dataclass
class RunReport:
    """Everything a solve learned, in the order it was learned."""

    iterations: int = 0
    converged_reason: str = "max_iter"
    residual_history: list[float] = field(default_factory=list)
    pointwise_residuals: list[list[tuple[int, float]]] = field(default_factory=list)
    jump_events: list[tuple[int, float]] = field(default_factory=list)  # (iteration, norm)
    ic_converged: bool = False
    ic_converged_iteration: int | None = None
    applied_updates: list[tuple[int, str]] = field(default_factory=list)  # (iteration, sweep)
    mailbox_deposits: int = 0
    mailbox_consumed: int = 0
    timings: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def jump_history(self) -> list[float]:
        """Per-iteration boundary jump: the last norm recorded in each
        iteration, in iteration order. The raw per-deposit trace (two entries
        per iteration under FCF) stays in jump_events."""
        by_it = self.jump_by_iteration()
        return [by_it[k] for k in sorted(by_it)]

    def jump_by_iteration(self) -> dict[int, float]:
        """Last jump norm recorded in each iteration."""
        out: dict[int, float] = {}
        for it, j in self.jump_events:
            out[it] = j
        return out


WaveformFn = Callable[[float], float]


def pulsatile_waveform(period: float) -> WaveformFn:
    """Smooth pulse that vanishes at both ends of the period and peaks mid-cycle."""

    def f(t: float) -> float:
        return 0.5 + 0.5 * math.cos(2.0 * math.pi * t / period - math.pi)

    return f

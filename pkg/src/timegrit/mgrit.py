"""Multilevel time-grid solver core.

Everything here is expressed over index ranges of one level: block-forward
sweeps, F/C relaxation, C-point residuals, injection plus FAS right-hand
side assembly, and the coarse-to-fine correction. The executor calls the
same range primitives on per-worker subranges; the serial operations below
call them over full ranges. There is exactly one implementation of each
sweep, so serial and multi-worker runs do identical arithmetic.

FAS bookkeeping: a coarse level solves v_j = step(v_{j-1}) + fas_rhs[j]
where fas_rhs[j] = r_j + injected_j - step(injected_{j-1}); for linear
applications this reduces to the classical defect correction, and for
nonlinear ones it is the full approximation scheme. Index 0 of every level
keeps fas_rhs = 0 and its injected value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from . import kernels
from .app import Application, SpaceTimeState
from .errors import ConfigError, HierarchyError
from .grid import Hierarchy
from .kernels import pure

RELAXATIONS = ("F", "FCF")
TOL_MODES = ("absolute", "relative")
COARSE_OPERATORS = ("rediscretized", "exact_power")
KERNEL_CHOICES = ("auto", "pure", "compiled")


@dataclass(frozen=True)
class SolverConfig:
    """Solve-loop knobs. coarsen/max_levels describe the hierarchy the
    config expects (build_hierarchy consumes them); the solver itself reads
    structure off the Hierarchy it is given."""

    relaxation: str = "FCF"
    coarsen: int = 8
    max_levels: int = 2
    residual_tol: float = 1e-10
    tol_mode: str = "absolute"
    max_iterations: int = 100
    skip_first_down: bool = True
    coarse_operator: str = "rediscretized"
    kernel: str = "auto"

    def __post_init__(self) -> None:
        if self.relaxation not in RELAXATIONS:
            raise ConfigError(f"relaxation must be one of {RELAXATIONS}, got {self.relaxation!r}")
        if self.tol_mode not in TOL_MODES:
            raise ConfigError(f"tol_mode must be one of {TOL_MODES}, got {self.tol_mode!r}")
        if self.coarse_operator not in COARSE_OPERATORS:
            raise ConfigError(
                f"coarse_operator must be one of {COARSE_OPERATORS}, got {self.coarse_operator!r}"
            )
        if self.kernel not in KERNEL_CHOICES:
            raise ConfigError(f"kernel must be one of {KERNEL_CHOICES}, got {self.kernel!r}")
        if self.coarsen < 2:
            raise ConfigError(f"coarsen must be >= 2, got {self.coarsen}")
        if self.max_levels < 1:
            raise ConfigError(f"max_levels must be >= 1, got {self.max_levels}")
        if not self.residual_tol > 0.0:
            raise ConfigError(f"residual_tol must be positive, got {self.residual_tol}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")


class PyAppKernel(pure.StepKernel):
    """Kernel adapter over Application.step for apps without make_stepper.

    Only the pure drivers know how to call it; any StepError the app raises
    passes through unchanged.
    """

    def __init__(self, app: Application, level: int):
        self.app = app
        self.level = int(level)
        self.nx = app.dimension()

    def step_into(self, uprev, uout, t0: float, t1: float) -> None:
        u = np.array(uprev, dtype=np.float64, copy=True)
        out = self.app.step(u, float(t0), float(t1), self.level)
        uout[...] = out


class ChainKernel(pure.StepKernel):
    """Coarse step as the exact m-fold composition of the next-finer step.

    One coarse step replays the m fine steps at their exact fine times, so a
    coarse solve reproduces the fine-grid C-point values bit for bit. The
    fine time grid is shared with the finer level's runtime; the base index
    is recovered from t0, which is always one of that grid's entries.
    """

    def __init__(self, inner, m: int, fine_tgrid: np.ndarray, fine_dt: float):
        self.inner = inner
        self.m = int(m)
        self.fine_tgrid = fine_tgrid
        self.nx = int(inner.nx)
        self._span = float(m) * float(fine_dt)
        self._scratch = (
            np.zeros(self.nx, dtype=np.float64),
            np.zeros(self.nx, dtype=np.float64),
        )

    def step_into(self, uprev, uout, t0: float, t1: float) -> None:
        m = self.m
        tg = self.fine_tgrid
        base = int(round(float(t0) / self._span)) * m
        cur = uprev
        for i in range(m):
            dst = uout if i == m - 1 else self._scratch[i & 1]
            self.inner.step_py(cur, dst, tg[base + i], tg[base + i + 1])
            cur = dst


@dataclass
class LevelRuntime:
    """Per-level execution bundle: grid spec, time points, a step kernel,
    and the driver set matched to that kernel. Kernels hold scratch, so each
    worker builds its own runtimes."""

    spec: Any
    tgrid: np.ndarray
    kernel: Any
    backend: kernels.KernelBackend

    @property
    def nx(self) -> int:
        return int(self.kernel.nx)


def build_runtimes(
    app: Application,
    hierarchy: Hierarchy,
    coarse_operator: str = "rediscretized",
    kernel: str | None = None,
) -> list[LevelRuntime]:
    """One LevelRuntime per hierarchy level.

    rediscretized: every level gets its own kernel at its own dt and time
    grid t_n = n*dt. exact_power: coarse kernels chain the finer level's
    kernel and the coarse time grid is a slice-copy of the finer one, so
    chained steps see bitwise-identical fine times.
    """
    if coarse_operator not in COARSE_OPERATORS:
        raise ConfigError(
            f"coarse_operator must be one of {COARSE_OPERATORS}, got {coarse_operator!r}"
        )
    be = kernels.get_backend(None if kernel in (None, "auto") else kernel)
    runtimes: list[LevelRuntime] = []
    for spec in hierarchy.levels:
        if coarse_operator == "exact_power" and spec.level > 0:
            parent = runtimes[spec.level - 1]
            m = parent.spec.coarsen
            tgrid = parent.tgrid[::m].copy()
            chain = ChainKernel(parent.kernel, m, parent.tgrid, parent.spec.dt)
            runtimes.append(LevelRuntime(spec, tgrid, chain, kernels.PURE_BACKEND))
            continue
        tgrid = np.arange(spec.num_points, dtype=np.float64) * spec.dt
        kern = app.make_stepper(spec.level, spec.dt, be)
        if kern is None:
            runtimes.append(
                LevelRuntime(spec, tgrid, PyAppKernel(app, spec.level), kernels.PURE_BACKEND)
            )
        else:
            runtimes.append(LevelRuntime(spec, tgrid, kern, be))
    return runtimes


# ---------------------------------------------------------------------------
# Range primitives. `values` is the (num_points, nx) array of one level,
# `fas` its FAS right-hand side or None. Ranges are in that level's indices.


def run_seq(rt: LevelRuntime, values, fas, n0: int, n1: int) -> None:
    """Block-forward: values[n] = step(values[n-1]) (+ fas[n]) for n in (n0, n1]."""
    rt.backend.seq_range(rt.kernel, values, fas, n0, n1, rt.tgrid)


def run_f_relax(rt: LevelRuntime, values, fas, lo: int, hi: int) -> None:
    """Recompute the F-points of every coarse interval starting in [lo, hi).

    lo must sit on a C-point. The final grid point is a C-point, not an
    interval start, so a range reaching the end clips to num_points - 1.
    """
    m = _require_coarsen(rt)
    n = rt.spec.num_points
    c1 = hi if hi < n else n - 1
    rt.backend.f_relax_range(rt.kernel, values, fas, lo, c1, m, rt.tgrid)


def run_c_points(rt: LevelRuntime, values, fas, pts: np.ndarray) -> None:
    """values[p] = step(values[p-1]) (+ fas[p]) at each listed C-point."""
    rt.backend.c_relax_points(rt.kernel, values, fas, pts, rt.tgrid)


def run_residual(rt: LevelRuntime, values, fas, pts: np.ndarray, out: np.ndarray) -> None:
    """out[i] = step(values[p-1]) (+ fas[p]) - values[p] for p = pts[i]."""
    rt.backend.residual_points(rt.kernel, values, fas, pts, rt.tgrid, out)


def cpoint_range(rt: LevelRuntime, lo: int, hi: int) -> np.ndarray:
    """C-points of [lo, hi) that are stepped into: every m-th index, starting
    at lo, except index 0 (held by the initial condition / periodic update)."""
    m = _require_coarsen(rt)
    start = lo if lo > 0 else m
    return np.arange(start, hi, m, dtype=np.intp)


def inject_range(fine_values, coarse: SpaceTimeState, jlo: int, jhi: int, m: int) -> None:
    """coarse.values[j] = restricted_guess[j] = fine_values[j*m], j in [jlo, jhi)."""
    src = fine_values[jlo * m : (jhi - 1) * m + 1 : m]
    coarse.values[jlo:jhi] = src
    coarse.restricted_guess[jlo:jhi] = src


def defect_range(
    rt_coarse: LevelRuntime,
    coarse: SpaceTimeState,
    resid: np.ndarray,
    resid_base: int,
    jlo: int,
    jhi: int,
    scratch: np.ndarray | None = None,
) -> None:
    """Assemble fas_rhs[j] = r_j + injected_j - step(injected_{j-1}) over
    [jlo, jhi), jlo >= 1. resid[j - resid_base] is the fine residual at the
    C-point j; coarse.values must still hold the injected guesses."""
    if jlo < 1:
        raise HierarchyError(f"defect range must start at 1 or later, got {jlo}")
    k = rt_coarse.kernel
    tg = rt_coarse.tgrid
    values = coarse.values
    fas = coarse.fas_rhs
    if scratch is None:
        scratch = np.empty(rt_coarse.nx, dtype=np.float64)
    for j in range(jlo, jhi):
        k.step_py(values[j - 1], scratch, tg[j - 1], tg[j])
        np.subtract(values[j], scratch, out=scratch)
        np.add(resid[j - resid_base], scratch, out=fas[j])


def correct_range(fine_values, coarse: SpaceTimeState, jlo: int, jhi: int, m: int) -> None:
    """fine[j*m] += coarse.values[j] - restricted_guess[j], j in [jlo, jhi).

    Index 0 is always skipped: the initial condition row never takes a
    coarse correction (and the correction there is identically zero, so
    adding it would only risk flipping signed zeros).
    """
    j0 = max(jlo, 1)
    if j0 >= jhi:
        return
    rows = slice(j0 * m, (jhi - 1) * m + 1, m)
    fine_values[rows] += coarse.values[j0:jhi] - coarse.restricted_guess[j0:jhi]


def _require_coarsen(rt: LevelRuntime) -> int:
    m = rt.spec.coarsen
    if m is None:
        raise HierarchyError(
            f"level {rt.spec.level} is the coarsest; it has no F/C structure"
        )
    return m


def aggregate_from_squares(squares: np.ndarray) -> float:
    """Aggregate residual norm from per-C-point squared spatial norms."""
    return math.sqrt(float(np.sum(squares)))


# ---------------------------------------------------------------------------
# Serial whole-level operations. These are the reference forms used by tests
# and by anything that wants one level manipulated in place without the
# executor; each is a full-range call of the primitives above.


def _resolve_runtimes(app, hierarchy, runtimes, coarse_operator, kernel):
    if runtimes is not None:
        return runtimes
    return build_runtimes(app, hierarchy, coarse_operator, kernel)


def sequential_solve(
    app: Application,
    hierarchy: Hierarchy,
    level: int,
    state: SpaceTimeState,
    start: int = 0,
    stop: int | None = None,
    runtimes: list[LevelRuntime] | None = None,
    coarse_operator: str = "rediscretized",
    kernel: str | None = None,
) -> SpaceTimeState:
    """Block-forward solve of one level over (start, stop]."""
    rts = _resolve_runtimes(app, hierarchy, runtimes, coarse_operator, kernel)
    rt = rts[level]
    n = rt.spec.num_points
    if stop is None:
        stop = n - 1
    if not 0 <= start < stop <= n - 1:
        raise ConfigError(f"bad solve range ({start}, {stop}] on level of {n} points")
    run_seq(rt, state.values, state.fas_rhs, start, stop)
    return state


def f_relax(app, hierarchy, level, state, runtimes=None, coarse_operator="rediscretized", kernel=None):
    """Recompute all F-points from the C-point values."""
    rts = _resolve_runtimes(app, hierarchy, runtimes, coarse_operator, kernel)
    rt = rts[level]
    run_f_relax(rt, state.values, state.fas_rhs, 0, rt.spec.num_points)
    return state


def c_relax(app, hierarchy, level, state, runtimes=None, coarse_operator="rediscretized", kernel=None):
    """Recompute all C-points except index 0 from their preceding F-point."""
    rts = _resolve_runtimes(app, hierarchy, runtimes, coarse_operator, kernel)
    rt = rts[level]
    pts = cpoint_range(rt, 0, rt.spec.num_points)
    run_c_points(rt, state.values, state.fas_rhs, pts)
    return state


def fcf_relax(app, hierarchy, level, state, runtimes=None, coarse_operator="rediscretized", kernel=None):
    rts = _resolve_runtimes(app, hierarchy, runtimes, coarse_operator, kernel)
    f_relax(app, hierarchy, level, state, rts)
    c_relax(app, hierarchy, level, state, rts)
    f_relax(app, hierarchy, level, state, rts)
    return state


def compute_residual(
    app, hierarchy, level, state, runtimes=None, coarse_operator="rediscretized", kernel=None
) -> list[tuple[int, np.ndarray]]:
    """Pointwise defects r_c = step(values[c-1]) (+ fas[c]) - values[c] at
    every C-point. Index 0 carries a zero residual by convention."""
    rts = _resolve_runtimes(app, hierarchy, runtimes, coarse_operator, kernel)
    rt = rts[level]
    pts = cpoint_range(rt, 0, rt.spec.num_points)
    out = np.empty((len(pts), rt.nx), dtype=np.float64)
    run_residual(rt, state.values, state.fas_rhs, pts, out)
    result = [(0, np.zeros(rt.nx, dtype=np.float64))]
    result.extend((int(p), out[i]) for i, p in enumerate(pts))
    return result


def residual_norm(app: Application, residuals: Sequence[tuple[int, np.ndarray]]) -> float:
    """Aggregate norm: sqrt of the summed squared spatial norms."""
    squares = np.array([float(np.dot(r, r)) for _, r in residuals], dtype=np.float64)
    return aggregate_from_squares(squares)


def fas_restrict(
    app,
    hierarchy,
    fine_state: SpaceTimeState,
    fine_residuals: Sequence[tuple[int, np.ndarray]],
    coarse_state: SpaceTimeState,
    runtimes=None,
    coarse_operator="rediscretized",
    kernel=None,
) -> SpaceTimeState:
    """Inject the fine C-point values and assemble the coarse FAS right-hand
    side from the fine residuals."""
    if coarse_state.level != fine_state.level + 1:
        raise ConfigError(
            f"restriction goes one level down, got {fine_state.level} -> {coarse_state.level}"
        )
    rts = _resolve_runtimes(app, hierarchy, runtimes, coarse_operator, kernel)
    rt_f = rts[fine_state.level]
    rt_c = rts[coarse_state.level]
    m = _require_coarsen(rt_f)
    n_c = rt_c.spec.num_points
    if (fine_state.num_points - 1) // m + 1 != n_c:
        raise ConfigError(
            f"coarse level of {n_c} points does not match {fine_state.num_points} "
            f"fine points at coarsening {m}"
        )
    resid = np.zeros((n_c, rt_c.nx), dtype=np.float64)
    seen = np.zeros(n_c, dtype=bool)
    for idx, vec in fine_residuals:
        if idx % m != 0 or not 0 <= idx // m < n_c:
            raise ConfigError(f"residual index {idx} is not a C-point of the fine level")
        resid[idx // m] = vec
        seen[idx // m] = True
    if not seen[1:].all():
        missing = int(np.flatnonzero(~seen[1:])[0]) + 1
        raise ConfigError(f"residual list misses C-point {missing * m}")
    inject_range(fine_state.values, coarse_state, 0, n_c, m)
    coarse_state.fas_rhs[0] = 0.0
    defect_range(rt_c, coarse_state, resid, 0, 1, n_c)
    return coarse_state


def interpolate_and_correct(
    app,
    hierarchy,
    coarse_state: SpaceTimeState,
    fine_state: SpaceTimeState,
    runtimes=None,
    coarse_operator="rediscretized",
    kernel=None,
) -> SpaceTimeState:
    """Add the coarse increment at fine C-points, then F-relax the fine level
    (together: the ideal interpolation applied to the coarse correction)."""
    if coarse_state.level != fine_state.level + 1:
        raise ConfigError(
            f"correction goes one level up, got {coarse_state.level} -> {fine_state.level}"
        )
    rts = _resolve_runtimes(app, hierarchy, runtimes, coarse_operator, kernel)
    rt_f = rts[fine_state.level]
    m = _require_coarsen(rt_f)
    correct_range(fine_state.values, coarse_state, 0, coarse_state.num_points, m)
    run_f_relax(rt_f, fine_state.values, fine_state.fas_rhs, 0, rt_f.spec.num_points)
    return fine_state


def relax_level(app, hierarchy, level, state, relaxation: str, runtimes=None):
    """One relaxation sweep: F or F-C-F per the named scheme."""
    if relaxation == "F":
        f_relax(app, hierarchy, level, state, runtimes)
    elif relaxation == "FCF":
        fcf_relax(app, hierarchy, level, state, runtimes)
    else:
        raise ConfigError(f"relaxation must be one of {RELAXATIONS}, got {relaxation!r}")
    return state


def vcycle(
    app: Application,
    hierarchy: Hierarchy,
    config: SolverConfig,
    states: Sequence[SpaceTimeState],
    level: int = 0,
    runtimes: list[LevelRuntime] | None = None,
) -> Sequence[SpaceTimeState]:
    """One V-cycle from `level` down: relax, residual, restrict, recurse (or
    solve the coarsest level directly), correct, F-relax."""
    if level >= len(hierarchy) - 1:
        raise HierarchyError(f"vcycle needs a coarser level below {level}")
    rts = _resolve_runtimes(app, hierarchy, runtimes, config.coarse_operator, config.kernel)
    relax_level(app, hierarchy, level, states[level], config.relaxation, rts)
    residuals = compute_residual(app, hierarchy, level, states[level], rts)
    cycle_below(app, hierarchy, config, states, level, residuals, rts)
    return states


def cycle_below(
    app: Application,
    hierarchy: Hierarchy,
    config: SolverConfig,
    states: Sequence[SpaceTimeState],
    level: int,
    residuals: Sequence[tuple[int, np.ndarray]],
    runtimes: list[LevelRuntime],
) -> None:
    """The sub-cycle under `level`: restriction with the given residuals,
    coarse solve or recursion, and the correction back up. Split out so the
    solve loop can reuse a residual pass it already made for halting."""
    coarse = states[level + 1]
    fas_restrict(app, hierarchy, states[level], residuals, coarse, runtimes)
    if level + 1 == len(hierarchy) - 1:
        sequential_solve(app, hierarchy, level + 1, coarse, runtimes=runtimes)
    else:
        vcycle(app, hierarchy, config, states, level + 1, runtimes)
    interpolate_and_correct(app, hierarchy, coarse, states[level], runtimes)


def solve(
    app: Application,
    hierarchy: Hierarchy,
    config: SolverConfig,
    executor_config=None,
):
    """Non-periodic solve to tolerance. Delegates to the executor engine
    (serial unless executor_config says otherwise); returns the fine
    SpaceTimeState and a RunReport."""
    from .executors import run

    return run(app, hierarchy, config, periodic_config=None, executor_config=executor_config)

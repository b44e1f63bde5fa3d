"""Concrete time-stepping applications and cycle-map utilities.

Three backends ship: a dense linear ODE system, a 1-D heat rod driven
through its left boundary, and a scalar ODE with a cubic nonlinearity. All
use backward Euler; the linear solves are factored once per (level, dt) and
the factors are shared with the step kernels.

The cycle-map helpers (periodic_fixed_point, sequential_cycles,
cycle_map_spectral_radius) treat one period of the fine grid as a map S from
u(0) to u(T) and work with its fixed point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels
from .app import Application
from .errors import ConfigError, OracleError
from .grid import LevelSpec

_WAVEFORM_MODES = {"pulsatile": kernels.WAVE_PULSATILE, "constant": kernels.WAVE_CONSTANT}

# Shipped default linear system: strictly diagonally dominant with negative
# diagonal, so every eigenvalue has negative real part and the cycle map
# contracts for any positive step size.
DEFAULT_LINEAR_MATRIX = (
    (-2.0, 1.0, 0.0, 0.0),
    (0.0, -1.5, 0.8, 0.0),
    (0.0, 0.0, -1.2, 0.6),
    (0.3, 0.0, 0.0, -2.5),
)
DEFAULT_LINEAR_FORCING = (1.0, 0.5, -0.25, 0.75)


def _resolve_backend(backend):
    if backend is None:
        return kernels.get_backend()
    if isinstance(backend, str):
        return kernels.get_backend(backend)
    return backend


def _waveform_mode(name: str) -> int:
    try:
        return _WAVEFORM_MODES[name]
    except KeyError:
        raise ConfigError(
            f"unknown waveform {name!r}; expected one of {sorted(_WAVEFORM_MODES)}"
        ) from None


class _KernelBackedApp(Application):
    """Shared plumbing: init-to-zero states, a per-(level, dt) kernel cache for
    single steps, and make_stepper delegating to _build_kernel."""

    period: float
    exact_affine: bool = False

    def __init__(self, period: float, amplitude: float, waveform: str, constant_value: float):
        if period <= 0.0:
            raise ConfigError(f"period must be positive, got {period}")
        self.period = float(period)
        self.amplitude = float(amplitude)
        self.waveform = waveform
        self.wmode = _waveform_mode(waveform)
        self.constant_value = float(constant_value)
        self._step_kernels: dict = {}

    def waveform_value(self, t: float) -> float:
        if self.wmode == kernels.WAVE_PULSATILE:
            return 0.5 + 0.5 * math.cos(2.0 * math.pi * t / self.period - math.pi)
        return self.constant_value

    def init(self, t: float) -> np.ndarray:
        return np.zeros(self.dimension(), dtype=np.float64)

    def _build_kernel(self, level: int, dt: float, backend):
        raise NotImplementedError

    def make_stepper(self, level: int, dt: float, backend):
        return self._build_kernel(level, float(dt), _resolve_backend(backend))

    def prepare(self, hierarchy) -> None:
        for spec in hierarchy.levels:
            self._prepare_level(spec.level, spec.dt)

    def _prepare_level(self, level: int, dt: float) -> None:
        """Build whatever (level, dt) cache the backend keeps; default: none."""

    def step(self, u: np.ndarray, t_start: float, t_stop: float, level: int) -> np.ndarray:
        dt = float(t_stop) - float(t_start)
        if dt <= 0.0:
            raise ConfigError(f"step needs t_stop > t_start, got [{t_start}, {t_stop}]")
        be = _resolve_backend(None)
        key = (level, dt, be.name)
        k = self._step_kernels.get(key)
        if k is None:
            k = self._build_kernel(level, dt, be)
            self._step_kernels[key] = k
        u = np.ascontiguousarray(u, dtype=np.float64)
        out = np.empty_like(u)
        k.step_py(u, out, float(t_start), float(t_stop))
        return out


class LinearOdeApp(_KernelBackedApp):
    """u' = A u + b * amplitude * f(t), backward Euler, LU factored once per
    (level, dt). A must have eigenvalues with negative real part for the
    cycle map to contract (true for the shipped default)."""

    exact_affine = True

    def __init__(
        self,
        system_matrix=DEFAULT_LINEAR_MATRIX,
        forcing_direction=DEFAULT_LINEAR_FORCING,
        period: float = 1.024,
        amplitude: float = 1.0,
        waveform: str = "pulsatile",
        constant_value: float = 1.0,
        use_cache: bool = True,
    ):
        super().__init__(period, amplitude, waveform, constant_value)
        a = np.array(system_matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ConfigError(f"system matrix must be square, got shape {a.shape}")
        b = np.ascontiguousarray(forcing_direction, dtype=np.float64)
        if b.shape != (a.shape[0],):
            raise ConfigError(
                f"forcing direction length {b.shape} does not match matrix {a.shape}"
            )
        self.system_matrix = a
        self.forcing_direction = b
        self.use_cache = bool(use_cache)
        self._factors: dict[tuple[int, float], tuple[np.ndarray, np.ndarray]] = {}

    @classmethod
    def scalar(cls, lam: float = 2.2, **kwargs) -> "LinearOdeApp":
        """Scalar decay u' = -lam*u + amplitude*f(t)."""
        return cls(system_matrix=((-float(lam),),), forcing_direction=(1.0,), **kwargs)

    def dimension(self) -> int:
        return self.system_matrix.shape[0]

    def _factor(self, level: int, dt: float):
        key = (level, dt)
        if self.use_cache:
            cached = self._factors.get(key)
            if cached is not None:
                return cached
        m = np.eye(self.dimension()) - dt * self.system_matrix
        try:
            lu, piv = scipy.linalg.lu_factor(m)
        except scipy.linalg.LinAlgError as exc:
            raise ConfigError(f"(I - dt*A) is singular for dt={dt}: {exc}") from None
        pair = (
            np.ascontiguousarray(lu, dtype=np.float64),
            np.ascontiguousarray(piv, dtype=np.int32),
        )
        if self.use_cache:
            self._factors[key] = pair
        return pair

    def _prepare_level(self, level: int, dt: float) -> None:
        self._factor(level, dt)

    def _build_kernel(self, level: int, dt: float, backend):
        lu, piv = self._factor(level, dt)
        return backend.dense_lu(
            lu, piv, self.forcing_direction, dt, self.amplitude,
            self.wmode, self.period, self.constant_value,
        )


class Heat1dApp(_KernelBackedApp):
    """1-D heat rod on (0, 1): u_t = nu * u_xx, zero right boundary, left
    Dirichlet boundary amplitude * f(t), interior unknowns only. Backward
    Euler gives a constant tridiagonal system solved by a Thomas sweep whose
    factorization is precomputed per (level, dt)."""

    exact_affine = True

    def __init__(
        self,
        spatial_points: int = 256,
        diffusivity: float = 0.1,
        period: float = 1.024,
        amplitude: float = 1.0,
        waveform: str = "pulsatile",
        constant_value: float = 1.0,
    ):
        super().__init__(period, amplitude, waveform, constant_value)
        if spatial_points < 1:
            raise ConfigError(f"need at least 1 spatial point, got {spatial_points}")
        if diffusivity <= 0.0:
            raise ConfigError(f"diffusivity must be positive, got {diffusivity}")
        self.spatial_points = int(spatial_points)
        self.diffusivity = float(diffusivity)
        self.mesh_width = 1.0 / (self.spatial_points + 1)
        self._factors: dict[tuple[int, float], tuple[np.ndarray, np.ndarray, float]] = {}

    def dimension(self) -> int:
        return self.spatial_points

    def _factor(self, level: int, dt: float):
        key = (level, dt)
        cached = self._factors.get(key)
        if cached is not None:
            return cached
        n = self.spatial_points
        r = self.diffusivity * dt / (self.mesh_width * self.mesh_width)
        diag = 1.0 + 2.0 * r
        dp = np.zeros(n, dtype=np.float64)
        lw = np.zeros(n, dtype=np.float64)
        dp[0] = diag
        for i in range(1, n):
            lw[i] = -r / dp[i - 1]
            dp[i] = diag - lw[i] * (-r)
        triple = (dp, lw, r)
        self._factors[key] = triple
        return triple

    def _prepare_level(self, level: int, dt: float) -> None:
        self._factor(level, dt)

    def _build_kernel(self, level: int, dt: float, backend):
        dp, lw, r = self._factor(level, dt)
        return backend.tridiag(
            dp, lw, r, self.amplitude, self.wmode, self.period, self.constant_value
        )


class NonlinearOdeApp(_KernelBackedApp):
    """Scalar u' = -(lam*u + cubic*u^3) + amplitude*f(t), backward Euler
    solved by Newton (derivative reuse once the residual is small). The
    backward Euler residual is monotone in u for lam, cubic >= 0, so the
    root is unique."""

    def __init__(
        self,
        lam: float = 2.2,
        cubic: float = 0.4,
        period: float = 1.024,
        amplitude: float = 1.0,
        waveform: str = "pulsatile",
        constant_value: float = 1.0,
        newton_tol: float = 1e-12,
        newton_max_iter: int = 25,
        reuse_below: float = 1e-6,
    ):
        super().__init__(period, amplitude, waveform, constant_value)
        if lam < 0.0 or cubic < 0.0:
            raise ConfigError(f"need lam >= 0 and cubic >= 0, got {lam}, {cubic}")
        self.lam = float(lam)
        self.cubic = float(cubic)
        self.newton_tol = float(newton_tol)
        self.newton_max_iter = int(newton_max_iter)
        self.reuse_below = float(reuse_below)

    @property
    def exact_affine(self) -> bool:  # type: ignore[override]
        return False

    def dimension(self) -> int:
        return 1

    def _build_kernel(self, level: int, dt: float, backend):
        return backend.newton_cubic(
            self.lam, self.cubic, dt, self.amplitude, self.wmode, self.period,
            self.constant_value, self.newton_tol, self.newton_max_iter, self.reuse_below,
        )


def cycle_time_grid(fine_level: LevelSpec) -> np.ndarray:
    """Time points t_n = n * dt of one period on the given level."""
    return np.arange(fine_level.num_points, dtype=np.float64) * fine_level.dt


def propagate_cycle(
    app: Application,
    fine_level: LevelSpec,
    u0: np.ndarray,
    backend=None,
    values: np.ndarray | None = None,
) -> np.ndarray:
    """One application of the cycle map S: block-forward over one period.

    Returns the full (num_points, nx) trajectory; row 0 is u0, row -1 is
    S(u0). Pass `values` to reuse a trajectory buffer.
    """
    be = _resolve_backend(backend)
    n = fine_level.num_points
    nx = app.dimension()
    if values is None:
        values = np.zeros((n, nx), dtype=np.float64)
    values[0] = u0
    kern = app.make_stepper(fine_level.level, fine_level.dt, be)
    if kern is None:
        from .mgrit import PyAppKernel

        kern = PyAppKernel(app, fine_level.level)
        be = kernels.PURE_BACKEND
    be.seq_range(kern, values, None, 0, n - 1, cycle_time_grid(fine_level))
    return values


def periodic_fixed_point(app: Application, fine_level: LevelSpec, backend=None) -> np.ndarray:
    """The initial condition u0* the cycle map S leaves unchanged.

    Affine apps: probe S's linear part column by column and solve
    (I - M) u0 = S(0) directly. Otherwise: fixed-point cycling until
    successive cycle starts agree to 1e-14, failing loudly if the map does
    not contract.
    """
    nx = app.dimension()
    buf = np.zeros((fine_level.num_points, nx), dtype=np.float64)
    if getattr(app, "exact_affine", False):
        c = propagate_cycle(app, fine_level, np.zeros(nx), backend, buf)[-1].copy()
        m = np.empty((nx, nx), dtype=np.float64)
        basis = np.zeros(nx, dtype=np.float64)
        for i in range(nx):
            basis[:] = 0.0
            basis[i] = 1.0
            m[:, i] = propagate_cycle(app, fine_level, basis, backend, buf)[-1] - c
        try:
            u0 = np.linalg.solve(np.eye(nx) - m, c)
        except np.linalg.LinAlgError as exc:
            raise OracleError(f"cycle map has a unit eigenvalue: {exc}") from None
        return np.ascontiguousarray(u0)

    u = np.asarray(app.init(0.0), dtype=np.float64).copy()
    tol = 1e-14
    max_cycles = 1000
    for _ in range(max_cycles):
        nxt = propagate_cycle(app, fine_level, u, backend, buf)[-1].copy()
        if not np.all(np.isfinite(nxt)):
            raise OracleError("cycle map diverged to non-finite values")
        diff = math.sqrt(float(np.dot(nxt - u, nxt - u)))
        u = nxt
        if diff < tol:
            return u
    raise OracleError(
        f"cycle map did not contract to {tol} within {max_cycles} cycles "
        f"(last change {diff:.3e})"
    )


@dataclass
class CycleTrace:
    """What sequential cycling produced, cycle by cycle."""

    fixed_point: np.ndarray
    end_states: list[np.ndarray] = field(default_factory=list)
    start_errors: list[float] = field(default_factory=list)  # |S^(k-1)(ic) - u0*|
    end_errors: list[float] = field(default_factory=list)  # |S^k(ic) - u0*|
    trajectories: list[np.ndarray] | None = None


def sequential_cycles(
    app: Application,
    fine_level: LevelSpec,
    cycles: int,
    ic: np.ndarray,
    backend=None,
    fixed_point: np.ndarray | None = None,
    keep_trajectories: bool = False,
) -> CycleTrace:
    """Run the cycle map q times from ic, recording distances to the fixed
    point at each cycle start and end. Times restart at 0 every cycle (the
    forcing is periodic, so local times make cycling bitwise identical to
    one long concatenated run)."""
    if cycles < 1:
        raise ConfigError(f"need at least one cycle, got {cycles}")
    if fixed_point is None:
        fixed_point = periodic_fixed_point(app, fine_level, backend)
    trace = CycleTrace(
        fixed_point=fixed_point, trajectories=[] if keep_trajectories else None
    )
    u = np.asarray(ic, dtype=np.float64).copy()
    for _ in range(cycles):
        d0 = u - fixed_point
        trace.start_errors.append(math.sqrt(float(np.dot(d0, d0))))
        values = propagate_cycle(app, fine_level, u, backend)
        u = values[-1].copy()
        if trace.trajectories is not None:
            trace.trajectories.append(values.copy())
        d1 = u - fixed_point
        trace.end_errors.append(math.sqrt(float(np.dot(d1, d1))))
        trace.end_states.append(u.copy())
    return trace


def cycle_map_spectral_radius(
    app: Application,
    fine_level: LevelSpec,
    backend=None,
    iterations: int = 48,
    burn_in: int = 16,
) -> float:
    """Power-iteration estimate of the cycle map's dominant |eigenvalue|.

    Uses the exact linear action for affine apps, a finite difference around
    the fixed point otherwise. The estimate averages the per-iteration norm
    growth after burn-in, which is robust to complex dominant pairs.
    """
    nx = app.dimension()
    buf = np.zeros((fine_level.num_points, nx), dtype=np.float64)
    if getattr(app, "exact_affine", False):
        base = propagate_cycle(app, fine_level, np.zeros(nx), backend, buf)[-1].copy()

        def action(v: np.ndarray) -> np.ndarray:
            return propagate_cycle(app, fine_level, v, backend, buf)[-1] - base

    else:
        star = periodic_fixed_point(app, fine_level, backend)
        s_star = propagate_cycle(app, fine_level, star, backend, buf)[-1].copy()
        eps = 1e-6 * max(1.0, math.sqrt(float(np.dot(star, star))))

        def action(v: np.ndarray) -> np.ndarray:
            out = propagate_cycle(app, fine_level, star + eps * v, backend, buf)[-1]
            return (out - s_star) / eps

    v = np.full(nx, 1.0 / math.sqrt(nx), dtype=np.float64)
    log_growth: list[float] = []
    for it in range(iterations):
        w = action(v)
        norm = math.sqrt(float(np.dot(w, w)))
        if not math.isfinite(norm):
            raise OracleError("power iteration diverged to non-finite values")
        if norm == 0.0:
            return 0.0
        if it >= burn_in:
            log_growth.append(math.log(norm))
        v = w / norm
    if not log_growth:
        raise OracleError("power iteration needs iterations > burn_in")
    return math.exp(sum(log_growth) / len(log_growth))

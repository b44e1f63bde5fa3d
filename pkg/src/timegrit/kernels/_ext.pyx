# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled backward-Euler step kernels and range sweep drivers.

Each kernel advances one state row in place-free fashion (prev row in, next
row out) with the GIL released, so worker threads can sweep their blocks in
parallel. The drivers loop a kernel over a time-index range.

The arithmetic here is mirrored operation for operation by
timegrit.kernels.pure; keep the two in lockstep (the equivalence tests
assert bitwise agreement).
"""
from libc.math cimport cos, fabs, M_PI

import numpy as np


cdef enum WaveMode:
    _WAVE_PULSATILE = 0
    _WAVE_CONSTANT = 1

WAVE_PULSATILE = _WAVE_PULSATILE
WAVE_CONSTANT = _WAVE_CONSTANT


cdef inline double _waveform(int mode, double t, double period, double cval) noexcept nogil:
    if mode == _WAVE_PULSATILE:
        return 0.5 + 0.5 * cos(2.0 * M_PI * t / period - M_PI)
    return cval


cdef class StepKernel:
    """Base class: one implicit time step, nogil, returning -1 on failure."""

    cdef public Py_ssize_t nx
    cdef double[::1] work          # scratch row for residual sweeps
    cdef public double last_resid  # diagnostics for step failures
    cdef public int last_iters

    def __init__(self):
        raise TypeError("instantiate a concrete kernel, not StepKernel")

    cdef int step(self, const double* uprev, double* uout, double t0, double t1) except? -1 nogil:
        with gil:
            raise NotImplementedError

    def step_py(self, uprev, uout, double t0, double t1):
        """Single step callable from Python (used for one-off steps; the
        drivers below are the fast path for sweeps)."""
        cdef double[::1] up = uprev
        cdef double[::1] uo = uout
        cdef int status
        with nogil:
            status = self.step(&up[0], &uo[0], t0, t1)
        if status != 0:
            from ..errors import StepError
            raise StepError(
                f"step failed at t={t1!r}: residual {self.last_resid:.3e} "
                f"after {self.last_iters} iterations"
            )

    cdef void _alloc(self, Py_ssize_t nx):
        self.nx = nx
        self.work = np.zeros(nx, dtype=np.float64)
        self.last_resid = 0.0
        self.last_iters = 0


cdef class DenseLuKernel(StepKernel):
    """(I - dt*A) u_next = u + dt*amp*f(t_stop)*b, via a shared pivoted LU factor."""

    cdef double[:, ::1] lu
    cdef int[::1] piv
    cdef double[::1] b
    cdef double dt, period, amp, wconst
    cdef int wmode
    cdef double[::1] rhs

    def __init__(self, lu, piv, b, double dt, double amp, int wmode, double period, double wconst):
        self.lu = lu
        self.piv = piv
        self.b = b
        self.dt = dt
        self.amp = amp
        self.wmode = wmode
        self.period = period
        self.wconst = wconst
        self._alloc(b.shape[0])
        self.rhs = np.zeros(self.nx, dtype=np.float64)

    cdef int step(self, const double* uprev, double* uout, double t0, double t1) except? -1 nogil:
        cdef Py_ssize_t i, j, n = self.nx
        cdef int p
        cdef double a, coef, s, tmp
        a = self.amp * _waveform(self.wmode, t1, self.period, self.wconst)
        coef = self.dt * a
        for i in range(n):
            self.rhs[i] = uprev[i] + coef * self.b[i]
        # apply the recorded row interchanges, then unit-L forward and U backward solves
        for i in range(n):
            p = self.piv[i]
            if p != i:
                tmp = self.rhs[i]
                self.rhs[i] = self.rhs[p]
                self.rhs[p] = tmp
        for i in range(1, n):
            s = self.rhs[i]
            for j in range(i):
                s -= self.lu[i, j] * self.rhs[j]
            self.rhs[i] = s
        for i in range(n - 1, -1, -1):
            s = self.rhs[i]
            for j in range(i + 1, n):
                s -= self.lu[i, j] * self.rhs[j]
            self.rhs[i] = s / self.lu[i, i]
        for i in range(n):
            uout[i] = self.rhs[i]
        return 0


cdef class TridiagKernel(StepKernel):
    """Backward-Euler heat step: Thomas sweep with a precomputed factorization.

    System: (1+2r) u_i - r u_{i-1} - r u_{i+1} = u_i^old + r*g(t_stop)*delta_{i,0},
    left Dirichlet boundary g(t) = amp*f(t), right boundary zero.
    """

    cdef double[::1] dp   # modified diagonal
    cdef double[::1] lw   # forward multipliers
    cdef double r, sup, period, amp, wconst
    cdef int wmode
    cdef double[::1] y

    def __init__(self, dp, lw, double r, double amp, int wmode, double period, double wconst):
        self.dp = dp
        self.lw = lw
        self.r = r
        self.sup = -r
        self.amp = amp
        self.wmode = wmode
        self.period = period
        self.wconst = wconst
        self._alloc(dp.shape[0])
        self.y = np.zeros(self.nx, dtype=np.float64)

    cdef int step(self, const double* uprev, double* uout, double t0, double t1) except? -1 nogil:
        cdef Py_ssize_t i, n = self.nx
        cdef double g
        g = self.amp * _waveform(self.wmode, t1, self.period, self.wconst)
        self.y[0] = uprev[0] + self.r * g
        for i in range(1, n):
            self.y[i] = uprev[i] - self.lw[i] * self.y[i - 1]
        uout[n - 1] = self.y[n - 1] / self.dp[n - 1]
        for i in range(n - 2, -1, -1):
            uout[i] = (self.y[i] - self.sup * uout[i + 1]) / self.dp[i]
        return 0


cdef class NewtonCubicKernel(StepKernel):
    """Scalar backward Euler for u' = -(lam*u + nuc*u^3) + amp*f(t), solved by
    Newton with derivative reuse once the residual is already small."""

    cdef double lam, nuc, dt, period, amp, wconst, tol, reuse_below
    cdef int wmode, max_iter

    def __init__(self, double lam, double nuc, double dt, double amp, int wmode,
                  double period, double wconst, double tol, int max_iter, double reuse_below):
        self.lam = lam
        self.nuc = nuc
        self.dt = dt
        self.amp = amp
        self.wmode = wmode
        self.period = period
        self.wconst = wconst
        self.tol = tol
        self.max_iter = max_iter
        self.reuse_below = reuse_below
        self._alloc(1)

    cdef int step(self, const double* uprev, double* uout, double t0, double t1) except? -1 nogil:
        cdef double up = uprev[0]
        cdef double fv, v, r, dr
        cdef int it = 0
        fv = self.amp * _waveform(self.wmode, t1, self.period, self.wconst)
        v = up
        r = v - up + self.dt * (self.lam * v + self.nuc * v * v * v - fv)
        dr = 1.0
        while fabs(r) >= self.tol:
            if it == self.max_iter:
                self.last_resid = r
                self.last_iters = it
                return -1
            if it == 0 or fabs(r) >= self.reuse_below:
                dr = 1.0 + self.dt * (self.lam + 3.0 * self.nuc * v * v)
            v = v - r / dr
            r = v - up + self.dt * (self.lam * v + self.nuc * v * v * v - fv)
            it += 1
        self.last_iters = it
        uout[0] = v
        return 0


cdef int _add_fas(double[:, ::1] values, double[:, ::1] fas, Py_ssize_t n, Py_ssize_t nx) except? -1 nogil:
    cdef Py_ssize_t i
    for i in range(nx):
        values[n, i] = values[n, i] + fas[n, i]
    return 0


def seq_range(StepKernel k, double[:, ::1] values, object fas_obj,
              Py_ssize_t n0, Py_ssize_t n1, double[::1] tgrid):
    """values[n] = step(values[n-1]) (+ fas[n]) for n in (n0, n1]."""
    cdef bint has_fas = fas_obj is not None
    cdef double[:, ::1] fas = fas_obj if has_fas else values
    cdef Py_ssize_t n, nx = k.nx
    cdef int status = 0
    cdef Py_ssize_t bad = -1
    with nogil:
        for n in range(n0 + 1, n1 + 1):
            status = k.step(&values[n - 1, 0], &values[n, 0], tgrid[n - 1], tgrid[n])
            if status != 0:
                bad = n
                break
            if has_fas:
                _add_fas(values, fas, n, nx)
    if bad >= 0:
        _raise_step(k, bad)


def f_relax_range(StepKernel k, double[:, ::1] values, object fas_obj,
                  Py_ssize_t c0, Py_ssize_t c1, Py_ssize_t m, double[::1] tgrid):
    """Recompute F-points of every interval [s, s+m) for s = c0, c0+m, ... < c1."""
    cdef bint has_fas = fas_obj is not None
    cdef double[:, ::1] fas = fas_obj if has_fas else values
    cdef Py_ssize_t s, n, nx = k.nx
    cdef int status = 0
    cdef Py_ssize_t bad = -1
    with nogil:
        s = c0
        while s < c1:
            for n in range(s + 1, s + m):
                status = k.step(&values[n - 1, 0], &values[n, 0], tgrid[n - 1], tgrid[n])
                if status != 0:
                    bad = n
                    break
                if has_fas:
                    _add_fas(values, fas, n, nx)
            if bad >= 0:
                break
            s += m
    if bad >= 0:
        _raise_step(k, bad)


def c_relax_points(StepKernel k, double[:, ::1] values, object fas_obj,
                   Py_ssize_t[::1] pts, double[::1] tgrid):
    """values[p] = step(values[p-1]) (+ fas[p]) for each listed point."""
    cdef bint has_fas = fas_obj is not None
    cdef double[:, ::1] fas = fas_obj if has_fas else values
    cdef Py_ssize_t j, p, nx = k.nx
    cdef int status = 0
    cdef Py_ssize_t bad = -1
    with nogil:
        for j in range(pts.shape[0]):
            p = pts[j]
            status = k.step(&values[p - 1, 0], &values[p, 0], tgrid[p - 1], tgrid[p])
            if status != 0:
                bad = p
                break
            if has_fas:
                _add_fas(values, fas, p, nx)
    if bad >= 0:
        _raise_step(k, bad)


def residual_points(StepKernel k, double[:, ::1] values, object fas_obj,
                    Py_ssize_t[::1] pts, double[::1] tgrid, double[:, ::1] out):
    """out[j] = step(values[p-1]) (+ fas[p]) - values[p] for each listed point."""
    cdef bint has_fas = fas_obj is not None
    cdef double[:, ::1] fas = fas_obj if has_fas else values
    cdef Py_ssize_t j, p, i, nx = k.nx
    cdef int status = 0
    cdef Py_ssize_t bad = -1
    with nogil:
        for j in range(pts.shape[0]):
            p = pts[j]
            status = k.step(&values[p - 1, 0], &k.work[0], tgrid[p - 1], tgrid[p])
            if status != 0:
                bad = p
                break
            if has_fas:
                for i in range(nx):
                    k.work[i] = k.work[i] + fas[p, i]
            for i in range(nx):
                out[j, i] = k.work[i] - values[p, i]
    if bad >= 0:
        _raise_step(k, bad)


def _raise_step(StepKernel k, Py_ssize_t n):
    from ..errors import StepError
    raise StepError(
        f"step failed at time index {n}: residual {k.last_resid:.3e} "
        f"after {k.last_iters} iterations"
    )

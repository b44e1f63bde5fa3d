"""Pure-Python mirrors of the compiled step kernels.

Same arithmetic, same operation order, same results bit for bit (the
extension is compiled with FP contraction off to keep that true). These are
the import-time fallback when the extension is missing and the reference
half of the kernel benchmark.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import StepError

WAVE_PULSATILE = 0
WAVE_CONSTANT = 1


def _waveform(mode: int, t: float, period: float, cval: float) -> float:
    if mode == WAVE_PULSATILE:
        return 0.5 + 0.5 * math.cos(2.0 * math.pi * t / period - math.pi)
    return cval


class _StepFailure(Exception):
    """Internal marker: a kernel gave up; the driver adds the time index."""


class StepKernel:
    """Base: step_into(uprev, uout, t0, t1) advances one row."""

    nx: int
    last_resid: float = 0.0
    last_iters: int = 0

    def step_into(self, uprev, uout, t0: float, t1: float) -> None:
        raise NotImplementedError

    def step_py(self, uprev, uout, t0: float, t1: float) -> None:
        """Single step callable from Python; same signature as the compiled one."""
        try:
            self.step_into(uprev, uout, t0, t1)
        except _StepFailure:
            raise StepError(
                f"step failed at t={t1!r}: residual {self.last_resid:.3e} "
                f"after {self.last_iters} iterations"
            ) from None


class DenseLuKernel(StepKernel):
    def __init__(self, lu, piv, b, dt, amp, wmode, period, wconst):
        self.nx = len(b)
        self._lu = [[float(x) for x in row] for row in np.asarray(lu)]
        self._piv = [int(p) for p in piv]
        self._b = [float(x) for x in b]
        self._dt = float(dt)
        self._amp = float(amp)
        self._wmode = int(wmode)
        self._period = float(period)
        self._wconst = float(wconst)

    def step_into(self, uprev, uout, t0, t1):
        n = self.nx
        lu, piv, b = self._lu, self._piv, self._b
        a = self._amp * _waveform(self._wmode, t1, self._period, self._wconst)
        coef = self._dt * a
        rhs = [float(uprev[i]) + coef * b[i] for i in range(n)]
        for i in range(n):
            p = piv[i]
            if p != i:
                rhs[i], rhs[p] = rhs[p], rhs[i]
        for i in range(1, n):
            s = rhs[i]
            row = lu[i]
            for j in range(i):
                s -= row[j] * rhs[j]
            rhs[i] = s
        for i in range(n - 1, -1, -1):
            s = rhs[i]
            row = lu[i]
            for j in range(i + 1, n):
                s -= row[j] * rhs[j]
            rhs[i] = s / row[i]
        for i in range(n):
            uout[i] = rhs[i]


class TridiagKernel(StepKernel):
    def __init__(self, dp, lw, r, amp, wmode, period, wconst):
        self.nx = len(dp)
        self._dp = [float(x) for x in dp]
        self._lw = [float(x) for x in lw]
        self._r = float(r)
        self._sup = -float(r)
        self._amp = float(amp)
        self._wmode = int(wmode)
        self._period = float(period)
        self._wconst = float(wconst)
        self._y = [0.0] * self.nx

    def step_into(self, uprev, uout, t0, t1):
        n = self.nx
        dp, lw, y = self._dp, self._lw, self._y
        sup = self._sup
        g = self._amp * _waveform(self._wmode, t1, self._period, self._wconst)
        y[0] = float(uprev[0]) + self._r * g
        for i in range(1, n):
            y[i] = float(uprev[i]) - lw[i] * y[i - 1]
        last = y[n - 1] / dp[n - 1]
        uout[n - 1] = last
        for i in range(n - 2, -1, -1):
            last = (y[i] - sup * last) / dp[i]
            uout[i] = last


class NewtonCubicKernel(StepKernel):
    def __init__(self, lam, nuc, dt, amp, wmode, period, wconst, tol, max_iter, reuse_below):
        self.nx = 1
        self._lam = float(lam)
        self._nuc = float(nuc)
        self._dt = float(dt)
        self._amp = float(amp)
        self._wmode = int(wmode)
        self._period = float(period)
        self._wconst = float(wconst)
        self._tol = float(tol)
        self._max_iter = int(max_iter)
        self._reuse_below = float(reuse_below)
        self.last_resid = 0.0
        self.last_iters = 0

    def step_into(self, uprev, uout, t0, t1):
        lam, nuc, dt = self._lam, self._nuc, self._dt
        up = float(uprev[0])
        fv = self._amp * _waveform(self._wmode, t1, self._period, self._wconst)
        v = up
        r = v - up + dt * (lam * v + nuc * v * v * v - fv)
        dr = 1.0
        it = 0
        while abs(r) >= self._tol:
            if it == self._max_iter:
                self.last_resid = r
                self.last_iters = it
                raise _StepFailure
            if it == 0 or abs(r) >= self._reuse_below:
                dr = 1.0 + dt * (lam + 3.0 * nuc * v * v)
            v = v - r / dr
            r = v - up + dt * (lam * v + nuc * v * v * v - fv)
            it += 1
        self.last_iters = it
        uout[0] = v


def _raise_step(k, n):
    raise StepError(
        f"step failed at time index {n}: residual {k.last_resid:.3e} "
        f"after {k.last_iters} iterations"
    )


def seq_range(k, values, fas, n0, n1, tgrid):
    """values[n] = step(values[n-1]) (+ fas[n]) for n in (n0, n1]."""
    for n in range(n0 + 1, n1 + 1):
        try:
            k.step_into(values[n - 1], values[n], tgrid[n - 1], tgrid[n])
        except _StepFailure:
            _raise_step(k, n)
        if fas is not None:
            np.add(values[n], fas[n], out=values[n])


def f_relax_range(k, values, fas, c0, c1, m, tgrid):
    """Recompute F-points of every interval [s, s+m) for s = c0, c0+m, ... < c1."""
    for s in range(c0, c1, m):
        for n in range(s + 1, s + m):
            try:
                k.step_into(values[n - 1], values[n], tgrid[n - 1], tgrid[n])
            except _StepFailure:
                _raise_step(k, n)
            if fas is not None:
                np.add(values[n], fas[n], out=values[n])


def c_relax_points(k, values, fas, pts, tgrid):
    """values[p] = step(values[p-1]) (+ fas[p]) for each listed point."""
    for p in pts:
        try:
            k.step_into(values[p - 1], values[p], tgrid[p - 1], tgrid[p])
        except _StepFailure:
            _raise_step(k, p)
        if fas is not None:
            np.add(values[p], fas[p], out=values[p])


def residual_points(k, values, fas, pts, tgrid, out):
    """out[j] = step(values[p-1]) (+ fas[p]) - values[p] for each listed point."""
    work = np.zeros(k.nx, dtype=np.float64)
    for j, p in enumerate(pts):
        try:
            k.step_into(values[p - 1], work, tgrid[p - 1], tgrid[p])
        except _StepFailure:
            _raise_step(k, p)
        if fas is not None:
            np.add(work, fas[p], out=work)
        np.subtract(work, values[p], out=out[j])

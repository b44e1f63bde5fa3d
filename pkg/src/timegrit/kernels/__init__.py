"""Step-kernel backends: a compiled extension and a pure-Python mirror.

The two produce bit-identical results; the compiled one is just faster. The
default backend is picked at import: the extension when it built, otherwise
the pure mirror. Set TIMEGRIT_PURE_PYTHON=1 to force the pure path (useful
for the equivalence tests and the kernel benchmark).
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable

from . import pure

WAVE_PULSATILE = pure.WAVE_PULSATILE
WAVE_CONSTANT = pure.WAVE_CONSTANT

try:
    from . import _ext  # type: ignore[attr-defined]
except ImportError:  # pragma: no cover - exercised only in pure-only installs
    _ext = None

HAVE_COMPILED = _ext is not None


@dataclass(frozen=True)
class KernelBackend:
    """One matched set: kernel constructors plus the sweep drivers that know
    how to call them (the compiled drivers only accept compiled kernels)."""

    name: str
    dense_lu: Callable[..., Any]
    tridiag: Callable[..., Any]
    newton_cubic: Callable[..., Any]
    seq_range: Callable[..., None]
    f_relax_range: Callable[..., None]
    c_relax_points: Callable[..., None]
    residual_points: Callable[..., None]


PURE_BACKEND = KernelBackend(
    name="pure",
    dense_lu=pure.DenseLuKernel,
    tridiag=pure.TridiagKernel,
    newton_cubic=pure.NewtonCubicKernel,
    seq_range=pure.seq_range,
    f_relax_range=pure.f_relax_range,
    c_relax_points=pure.c_relax_points,
    residual_points=pure.residual_points,
)

COMPILED_BACKEND = None
if HAVE_COMPILED:
    COMPILED_BACKEND = KernelBackend(
        name="compiled",
        dense_lu=_ext.DenseLuKernel,
        tridiag=_ext.TridiagKernel,
        newton_cubic=_ext.NewtonCubicKernel,
        seq_range=_ext.seq_range,
        f_relax_range=_ext.f_relax_range,
        c_relax_points=_ext.c_relax_points,
        residual_points=_ext.residual_points,
    )


def get_backend(name: str | None = None) -> KernelBackend:
    """Resolve a backend by name ('compiled', 'pure', or None for the default)."""
    if name is None:
        if os.environ.get("TIMEGRIT_PURE_PYTHON", "") == "1":
            return PURE_BACKEND
        return COMPILED_BACKEND if COMPILED_BACKEND is not None else PURE_BACKEND
    if name == "pure":
        return PURE_BACKEND
    if name == "compiled":
        if COMPILED_BACKEND is None:
            raise ImportError("compiled kernel extension is not available")
        return COMPILED_BACKEND
    raise ValueError(f"unknown kernel backend {name!r}")


def active_backend_name() -> str:
    return get_backend().name

"""Command-line harness: configure runs, write CSV traces.

Config files are flat ``key = value`` text with ``#`` comments. Every key has
a default, unknown keys are errors, and ``--set key=value`` overrides file
values. All emitted CSVs use 17-significant-digit floats so reruns are
byte-comparable (wall-clock columns aside), and every file is written to a
temp name then renamed, so readers never see half a file.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from .app import initialize_state
from .backends import (
    Heat1dApp,
    LinearOdeApp,
    NonlinearOdeApp,
    cycle_map_spectral_radius,
    periodic_fixed_point,
    propagate_cycle,
    sequential_cycles,
)
from .errors import ConfigError, HierarchyError, OracleError, ProtocolError, StepError
from .executors import ExecutorConfig, measure, run
from .grid import build_hierarchy
from .mgrit import (
    COARSE_OPERATORS,
    KERNEL_CHOICES,
    RELAXATIONS,
    TOL_MODES,
    SolverConfig,
    sequential_solve,
)
from .periodic import PeriodicConfig

BACKENDS = ("linear", "heat", "nonlinear")
NX_DEFAULTS = {"linear": 4, "heat": 256, "nonlinear": 1}


def _fmt(x: float) -> str:
    return "%.17g" % x


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    try:
        return tuple(int(part.strip()) for part in raw.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from None


def _parse_str_list(raw: str) -> tuple[str, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(part.strip() for part in raw.split(","))


@dataclass(frozen=True)
class ExperimentConfig:
    backend: str = "linear"
    nx: str = "auto"  # "auto" or an integer literal
    lam: float = 2.2
    cubic: float = 0.4
    diffusivity: float = 0.1
    amplitude: float = 1.0
    period: float = 1.024
    fine_points: int = 1025
    coarsen: int = 8
    max_levels: int = 2
    relaxation: str = "FCF"
    residual_tol: float = 1e-10
    tol_mode: str = "absolute"
    max_iterations: int = 100
    skip_first_down: bool = True
    coarse_operator: str = "rediscretized"
    periodic: bool = False
    ic_tolerance: float = 1e-10
    mode: str = "serial"
    workers: int = 1
    repeats: int = 5
    cycles: int = 8
    seed: int = 0
    kernel: str = "auto"
    reference: str = "oracle"
    bench_workers: tuple[int, ...] = (1, 2, 4)
    bench_coarsen: tuple[int, ...] = ()
    bench_relaxations: tuple[str, ...] = ()
    out: str = "out"

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.nx != "auto":
            try:
                n = int(self.nx)
            except ValueError:
                raise ConfigError(f"nx must be 'auto' or an integer, got {self.nx!r}") from None
            if n < 1:
                raise ConfigError(f"nx must be >= 1, got {n}")
        if not self.period > 0:
            raise ConfigError(f"period must be positive, got {self.period}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.cycles < 1:
            raise ConfigError(f"cycles must be >= 1, got {self.cycles}")
        if self.reference != "oracle" and not self.reference.startswith("cycle:"):
            raise ConfigError(
                f"reference must be 'oracle' or 'cycle:N', got {self.reference!r}"
            )
        if self.reference.startswith("cycle:"):
            try:
                n = int(self.reference.split(":", 1)[1])
            except ValueError:
                raise ConfigError(f"bad cycle reference {self.reference!r}") from None
            if n < 1:
                raise ConfigError(f"cycle reference must be >= 1, got {n}")

    def resolved_nx(self) -> int:
        if self.nx == "auto":
            return NX_DEFAULTS[self.backend]
        return int(self.nx)


_PARSERS = {
    "backend": str,
    "nx": str,
    "lam": float,
    "cubic": float,
    "diffusivity": float,
    "amplitude": float,
    "period": float,
    "fine_points": int,
    "coarsen": int,
    "max_levels": int,
    "relaxation": str,
    "residual_tol": float,
    "tol_mode": str,
    "max_iterations": int,
    "skip_first_down": _parse_bool,
    "coarse_operator": str,
    "periodic": _parse_bool,
    "ic_tolerance": float,
    "mode": str,
    "workers": int,
    "repeats": int,
    "cycles": int,
    "seed": int,
    "kernel": str,
    "reference": str,
    "bench_workers": _parse_int_list,
    "bench_coarsen": _parse_int_list,
    "bench_relaxations": _parse_str_list,
    "out": str,
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Flat key = value lines into typed values; unknown keys are errors."""
    values: dict[str, object] = {}
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw_line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](raw)
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {raw!r}") from None
    return values


def config_lines(cfg: ExperimentConfig) -> list[str]:
    """The resolved config as round-trippable key = value lines."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, float):
            s = _fmt(v)
        elif isinstance(v, tuple):
            s = ",".join(str(e) for e in v)
        else:
            s = str(v)
        lines.append(f"{f.name} = {s}")
    return lines


def load_config(path: str | None, overrides: list[str], flag_values: dict) -> ExperimentConfig:
    values: dict[str, object] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text, path))
    for item in overrides:
        values.update(parse_config_text(item, "--set"))
    for key, val in flag_values.items():
        if val is not None:
            values[key] = val
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def make_app(cfg: ExperimentConfig):
    nx = cfg.resolved_nx()
    if cfg.backend == "linear":
        if nx == 1:
            return LinearOdeApp.scalar(cfg.lam, amplitude=cfg.amplitude, period=cfg.period)
        if nx == 4:
            return LinearOdeApp(amplitude=cfg.amplitude, period=cfg.period)
        raise ConfigError(f"linear backend ships nx in {{1, 4}}, got {nx}")
    if cfg.backend == "heat":
        return Heat1dApp(
            spatial_points=nx,
            diffusivity=cfg.diffusivity,
            amplitude=cfg.amplitude,
            period=cfg.period,
        )
    if nx != 1:
        raise ConfigError(f"nonlinear backend is scalar (nx = 1), got {nx}")
    return NonlinearOdeApp(
        lam=cfg.lam, cubic=cfg.cubic, amplitude=cfg.amplitude, period=cfg.period
    )


def make_hierarchy(cfg: ExperimentConfig):
    return build_hierarchy(cfg.fine_points, cfg.period, cfg.coarsen, cfg.max_levels)


def make_solver_config(cfg: ExperimentConfig) -> SolverConfig:
    return SolverConfig(
        relaxation=cfg.relaxation,
        coarsen=cfg.coarsen,
        max_levels=cfg.max_levels,
        residual_tol=cfg.residual_tol,
        tol_mode=cfg.tol_mode,
        max_iterations=cfg.max_iterations,
        skip_first_down=cfg.skip_first_down,
        coarse_operator=cfg.coarse_operator,
        kernel=cfg.kernel,
    )


def make_executor_config(cfg: ExperimentConfig, record_timings: bool = False) -> ExecutorConfig:
    return ExecutorConfig(mode=cfg.mode, workers=cfg.workers, record_timings=record_timings)


def write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_csv(path: str, header: str, rows: list[list[str]]) -> None:
    body = "\n".join([header] + [",".join(r) for r in rows])
    write_atomic(path, body + "\n")


def cmd_run(cfg: ExperimentConfig) -> int:
    app = make_app(cfg)
    h = make_hierarchy(cfg)
    scfg = make_solver_config(cfg)
    pcfg = PeriodicConfig(ic_tolerance=cfg.ic_tolerance) if cfg.periodic else None
    excfg = make_executor_config(cfg)
    state, report = run(app, h, scfg, pcfg, excfg)

    res_rows = []
    for it, rows in enumerate(report.pointwise_residuals, 1):
        for point, norm in rows:
            res_rows.append([str(it), str(point), _fmt(norm)])
    write_csv(
        os.path.join(cfg.out, "residuals.csv"),
        "iteration,cpoint_index,residual_norm",
        res_rows,
    )

    gaps = report.meta["boundary_gap_history"]
    wall = report.meta["wall_clock_history"]
    sum_rows = [
        [str(i + 1), _fmt(report.residual_history[i]), _fmt(gaps[i]), _fmt(wall[i])]
        for i in range(len(report.residual_history))
    ]
    write_csv(
        os.path.join(cfg.out, "summary.csv"),
        "iteration,aggregate_residual,jump_norm,wall_clock_s",
        sum_rows,
    )

    meta = config_lines(cfg)
    meta.append("# results")
    meta.append(f"# converged_reason = {report.converged_reason}")
    meta.append(f"# iterations = {report.iterations}")
    meta.append(f"# final_residual = {_fmt(report.residual_history[-1])}")
    meta.append(f"# kernel_backend = {report.meta['kernel_backend']}")
    if cfg.periodic:
        meta.append(f"# ic_converged = {str(report.ic_converged).lower()}")
        meta.append(f"# ic_converged_iteration = {report.ic_converged_iteration}")
        meta.append(f"# mailbox_deposits = {report.mailbox_deposits}")
        meta.append(f"# mailbox_consumed = {report.mailbox_consumed}")
    write_atomic(os.path.join(cfg.out, "meta.txt"), "\n".join(meta) + "\n")
    print(
        f"{cfg.backend}: {report.iterations} iterations, {report.converged_reason}, "
        f"final residual {_fmt(report.residual_history[-1])}"
    )
    return 0


def _reference_ic(cfg: ExperimentConfig, app, fine_level) -> np.ndarray:
    """The u(0) both error columns measure against."""
    if cfg.reference == "oracle":
        return periodic_fixed_point(app, fine_level)
    n = int(cfg.reference.split(":", 1)[1])
    u = app.init(0.0).copy()
    buf = np.zeros((fine_level.num_points, app.dimension()))
    for _ in range(n):
        u = propagate_cycle(app, fine_level, u, values=buf)[-1].copy()
    return u


def cmd_compare(cfg: ExperimentConfig) -> int:
    # The comparison always runs the periodic solver on one worker: the
    # per-iteration initial condition is what is being measured.
    app = make_app(cfg)
    h = make_hierarchy(cfg)
    fine = h[0]
    q = cfg.cycles
    star = _reference_ic(cfg, app, fine)
    star_traj = propagate_cycle(app, fine, star)
    dt = fine.dt

    trace = sequential_cycles(
        app, fine, q, app.init(0.0), fixed_point=star, keep_trajectories=True
    )

    def spacetime(traj: np.ndarray) -> float:
        diff = traj - star_traj
        return math.sqrt(dt * float(np.sum(diff[:-1] * diff[:-1])))

    seq_st = [spacetime(traj) for traj in trace.trajectories]

    mg_ic: dict[int, float] = {}
    mg_st: dict[int, float] = {}

    def callback(k: int, state) -> None:
        if k == 0:
            return
        mg_ic[k] = float(np.linalg.norm(state.values[0] - star))
        mg_st[k] = spacetime(state.values)

    scfg = replace(
        make_solver_config(cfg), residual_tol=1e-300, max_iterations=q
    )
    pcfg = PeriodicConfig(ic_tolerance=1e-300)
    run(app, h, scfg, pcfg, ExecutorConfig(mode="serial", workers=1), callback)

    rows = []
    for k in range(1, q + 1):
        rows.append(
            [
                str(k),
                _fmt(trace.start_errors[k - 1]),
                _fmt(mg_ic[k]),
                _fmt(seq_st[k - 1]),
                _fmt(mg_st[k]),
            ]
        )
    write_csv(
        os.path.join(cfg.out, "convergence.csv"),
        "k,seq_cycle_error,mgrit_iter_error,seq_spacetime_error,mgrit_spacetime_error",
        rows,
    )
    print(f"compare: {q} cycles vs {q} iterations written")
    return 0


def _baseline_cycles(cfg: ExperimentConfig, app, fine) -> int:
    """Cycles of plain sequential stepping until the cycle-start delta is
    below ic_tolerance."""
    buf = np.zeros((fine.num_points, app.dimension()))
    u_prev = app.init(0.0).copy()
    for q in range(1, max(cfg.max_iterations, 1000) + 1):
        u = propagate_cycle(app, fine, u_prev, values=buf)[-1].copy()
        if float(np.linalg.norm(u - u_prev)) < cfg.ic_tolerance:
            return q
        u_prev = u
    raise OracleError(
        f"sequential cycling did not reach ic_tolerance={cfg.ic_tolerance:g} "
        f"within {max(cfg.max_iterations, 1000)} cycles"
    )


def cmd_bench(cfg: ExperimentConfig) -> int:
    app = make_app(cfg)
    h = make_hierarchy(cfg)
    fine = h[0]
    q_star = _baseline_cycles(cfg, app, fine)

    buf = np.zeros((fine.num_points, app.dimension()))
    best_base = math.inf
    for _ in range(cfg.repeats):
        u = app.init(0.0).copy()
        t0 = time.perf_counter()
        for _ in range(q_star):
            u = propagate_cycle(app, fine, u, values=buf)[-1].copy()
        best_base = min(best_base, time.perf_counter() - t0)

    rows = [["0", "0", "baseline", _fmt(best_base), _fmt(1.0)]]
    worker_list = cfg.bench_workers or (1,)
    m_list = cfg.bench_coarsen or (cfg.coarsen,)
    relaxations = cfg.bench_relaxations or (cfg.relaxation,)
    prev_best: float | None = None
    for relax in relaxations:
        for m in m_list:
            bench_h = build_hierarchy(cfg.fine_points, cfg.period, m, cfg.max_levels)
            for w in worker_list:
                scfg = replace(
                    make_solver_config(cfg),
                    relaxation=relax,
                    coarsen=m,
                    residual_tol=1e30,  # halt on the IC flag, like the baseline
                )
                pcfg = PeriodicConfig(ic_tolerance=cfg.ic_tolerance)
                excfg = ExecutorConfig(
                    mode="serial" if w == 1 else "threaded", workers=w
                )
                result = measure(app, bench_h, scfg, pcfg, excfg, repeat=cfg.repeats)
                rows.append(
                    [str(w), str(m), relax, _fmt(result.best_s), _fmt(best_base / result.best_s)]
                )
                if prev_best is not None and result.best_s > prev_best * 1.05:
                    print(
                        f"note: {relax} m={m} W={w} slower than the previous worker "
                        f"count ({result.best_s:.3g}s vs {prev_best:.3g}s)",
                        file=sys.stderr,
                    )
                prev_best = result.best_s
            prev_best = None
    write_csv(
        os.path.join(cfg.out, "speedup.csv"),
        "workers,m,relaxation,best_wall_clock_s,speedup_vs_baseline",
        rows,
    )
    print(f"bench: baseline {q_star} cycles best {_fmt(best_base)}s, {len(rows) - 1} rows")
    return 0


def cmd_oracle(cfg: ExperimentConfig) -> int:
    app = make_app(cfg)
    h = make_hierarchy(cfg)
    radius = cycle_map_spectral_radius(app, h[0])
    if not radius < 1.0:
        raise OracleError(
            f"cycle map does not contract (spectral radius {radius:.6g} >= 1); "
            "no reachable time-periodic steady state"
        )
    star = periodic_fixed_point(app, h[0])
    print("fixed_point_t0 = " + ",".join(_fmt(v) for v in np.atleast_1d(star)))
    print("cycle_map_spectral_radius = " + _fmt(radius))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="timegrit",
        description="Multilevel-in-time solver experiments: run, compare, bench, oracle.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "solve once; write residuals.csv, summary.csv, meta.txt"),
        ("compare", "sequential cycling vs solver iterations; write convergence.csv"),
        ("bench", "timing sweep; write speedup.csv"),
        ("oracle", "print the periodic fixed point and cycle-map spectral radius"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="worker count override")
        p.add_argument("--seed", type=int, help="seed override")
    args = parser.parse_args(argv)

    flag_values = {"out": args.out, "workers": args.workers, "seed": args.seed}
    if args.workers is not None and args.workers > 1:
        flag_values["mode"] = "threaded"
    try:
        cfg = load_config(args.config, args.set, flag_values)
        handler = {
            "run": cmd_run,
            "compare": cmd_compare,
            "bench": cmd_bench,
            "oracle": cmd_oracle,
        }[args.command]
        return handler(cfg)
    except (ConfigError, HierarchyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StepError, ProtocolError, OracleError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point and file emission.

Subcommands: ``solve`` (value/policy fields + solve report), ``simulate``
(closed-loop trajectories from a prior solve), ``residual`` (pointwise
stationary-equation defect), and ``reproduce`` (full benchmark pipelines
with the published parameters, plus a manifest naming each output file's
figure panel).  All CSV floats use shortest round-trip decimals, so
identical configurations re-emit byte-identical files.

Exit codes: 0 converged, 2 iteration cap reached, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .control import PolicyField
from .grid import Grid, make_grid
from .oracle import fine_grid_reference
from .pde import DivergenceError, SchemeConfig, ValueField
from .policy import (SolveReport, compare_constrained, default_policy, grid_for,
                     hjb_residual, policy_iteration, warm_start_undiscount)
from .problem import BUILTIN_NAMES, ProblemSpec, builtin, load_problem, unconstrained
from .simulate import simulate_ode, simulate_sde

EXIT_OK = 0
EXIT_MAX_OUTER = 2
EXIT_DIVERGED = 3


@dataclass
class RunConfig:
    """Solver/simulation settings as parsed from the command line."""

    problem: str
    constrained: bool = True
    lambda_schedule: list[float] = field(default_factory=list)  # empty: problem default
    dt: list[float] = field(default_factory=lambda: [2.0])
    eps: float = 1e-6
    max_outer: int = 20000
    mode: str = "coupled"
    grid_n: list[int] | None = None
    x0: list[list[float]] = field(default_factory=list)
    horizon: float = 10.0
    step: float = 1e-3
    n_paths: int | None = None
    seed: int = 0
    out_dir: Path = Path(".")


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_value_csv(path: Path, grid: Grid, v: ValueField, u: PolicyField) -> None:
    d, m = grid.dim, u.control_dim
    header = [f"x{k+1}" for k in range(d)] + ["V"] + [f"u{j+1}" for j in range(m)]
    nodes = grid.nodes()
    rows = np.column_stack([nodes, v.v, u.u])
    _write_csv(path, header, rows)


def read_value_csv(path: Path, grid: Grid, dim: int, control_dim: int
                   ) -> tuple[ValueField, PolicyField]:
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    if data.ndim == 1:
        data = data[None, :]
    if data.shape != (grid.num_nodes, dim + 1 + control_dim):
        raise ValueError(f"{path}: expected {grid.num_nodes} rows x "
                         f"{dim + 1 + control_dim} columns, got {data.shape}")
    return (ValueField(grid, data[:, dim]),
            PolicyField(grid, data[:, dim + 1:]))


def write_trajectory_csv(path: Path, traj) -> None:
    d = traj.states.shape[1]
    m = traj.controls.shape[1]
    header = (["t"] + [f"x{k+1}" for k in range(d)] + [f"u{j+1}" for j in range(m)]
              + ["running_cost", "accumulated_cost"])
    rows = np.column_stack([traj.times, traj.states, traj.controls,
                            traj.running_cost, traj.accumulated_cost])
    _write_csv(path, header, rows)


def write_ensemble_csv(path: Path, ens) -> None:
    _write_csv(path, ["t", "mean_state_cost", "mean_running_cost"],
               np.column_stack([ens.times, ens.mean_state_cost, ens.mean_running_cost]))


def write_residual_csv(path: Path, grid: Grid, per_node: np.ndarray) -> None:
    header = [f"x{k+1}" for k in range(grid.dim)] + ["residual"]
    _write_csv(path, header, np.column_stack([grid.nodes(), per_node]))


def _report_payload(report: SolveReport, p: ProblemSpec, grid: Grid,
                    cfg: RunConfig) -> dict:
    payload = report.to_dict()
    payload["config"] = {
        "problem": cfg.problem,
        "constrained": cfg.constrained,
        "lambda_schedule": cfg.lambda_schedule or [p.discount],
        "dt": cfg.dt,
        "eps": cfg.eps,
        "mode": cfg.mode,
        "dim": p.dim,
        "control_dim": p.control_dim,
        "grid": {"lo": list(p.lo), "hi": list(p.hi), "n": [int(k) for k in grid.n]},
    }
    return payload


def _load_spec(name_or_path: str) -> ProblemSpec:
    if name_or_path in BUILTIN_NAMES:
        return builtin(name_or_path)
    path = Path(name_or_path)
    if not path.exists():
        raise FileNotFoundError(
            f"problem {name_or_path!r} is neither a builtin "
            f"({', '.join(BUILTIN_NAMES)}) nor a readable file")
    return load_problem(str(path))


def _scheme_cfgs(cfg: RunConfig) -> list[SchemeConfig]:
    return [SchemeConfig(dt=dt, mode=cfg.mode) for dt in cfg.dt]


def cmd_solve(cfg: RunConfig) -> int:
    p = _load_spec(cfg.problem)
    if not cfg.constrained:
        p = unconstrained(p)
    grid = grid_for(p, cfg.grid_n)
    u0 = default_policy(p, grid)
    schedule = cfg.lambda_schedule or [p.discount]
    cfgs = _scheme_cfgs(cfg)
    if len(cfgs) == 1 and len(schedule) > 1:
        cfgs = cfgs * len(schedule)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    try:
        if len(schedule) > 1:
            if schedule[-1] != 0.0:
                raise ValueError("a lambda schedule must end at 0")
            v, u, reports = warm_start_undiscount(
                replace(p, discount=schedule[0]), schedule, cfgs,
                eps=cfg.eps, max_outer=cfg.max_outer, grid=grid, u0=u0)
            report = reports[-1]
            report.iterations = [r for rep in reports for r in rep.iterations]
            report.converged = all(rep.converged for rep in reports)
        else:
            p = replace(p, discount=schedule[0])
            v, u, report = policy_iteration(p, u0, cfgs[0], eps=cfg.eps,
                                            max_outer=cfg.max_outer)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    write_value_csv(cfg.out_dir / "value.csv", grid, v, u)
    with open(cfg.out_dir / "report.json", "w") as fh:
        json.dump(_report_payload(report, p, grid, cfg), fh, indent=2)
    return EXIT_OK if report.converged else EXIT_MAX_OUTER


def _load_solved(value_dir: Path) -> tuple[ProblemSpec, Grid, ValueField, PolicyField, dict]:
    report_path = value_dir / "report.json"
    value_path = value_dir / "value.csv"
    for required in (report_path, value_path):
        if not required.exists():
            raise FileNotFoundError(f"missing solve output: {required}")
    with open(report_path) as fh:
        meta = json.load(fh)["config"]
    p = _load_spec(meta["problem"])
    if not meta["constrained"]:
        p = unconstrained(p)
    p = replace(p, discount=float(meta["lambda_schedule"][-1]))
    grid = make_grid(meta["grid"]["lo"], meta["grid"]["hi"], meta["grid"]["n"])
    v, u = read_value_csv(value_path, grid, meta["dim"], meta["control_dim"])
    return p, grid, v, u, meta


def cmd_simulate(cfg: RunConfig, value_dir: Path) -> int:
    p, grid, v, u, meta = _load_solved(value_dir)
    if cfg.n_paths is not None and not p.stochastic:
        print(f"error: --n-paths given but {p.name} is deterministic",
              file=sys.stderr)
        return 1
    starts = cfg.x0 or [list(0.5 * (p.lo + p.hi))]
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    for x0 in starts:
        x0 = np.asarray(x0, float)
        if np.any(x0 < p.lo) or np.any(x0 > p.hi):
            print(f"error: x0 {x0.tolist()} lies outside the domain", file=sys.stderr)
            return 1
        tag = "_".join(_fmt(c) for c in x0)
        traj = simulate_ode(p, u, x0, cfg.horizon, cfg.step)
        write_trajectory_csv(cfg.out_dir / f"trajectory_{tag}.csv", traj)
        if p.stochastic:
            ens = simulate_sde(p, u, x0, cfg.horizon, cfg.step,
                               n_paths=cfg.n_paths or 100, seed=cfg.seed)
            write_ensemble_csv(cfg.out_dir / f"ensemble_{tag}.csv", ens)
    return EXIT_OK


def cmd_residual(cfg: RunConfig, value_dir: Path, gradient: str = "central") -> int:
    p, grid, v, u, meta = _load_solved(value_dir)
    rep = hjb_residual(v, p, gradient=gradient)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_residual_csv(cfg.out_dir / "residual.csv", grid, rep.per_node)
    with open(cfg.out_dir / "residual_norms.json", "w") as fh:
        json.dump({"sup": rep.sup, "rms": rep.rms, "gradient": gradient}, fh, indent=2)
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark reproduction
# ---------------------------------------------------------------------------

_REPRO = {
    (1, "det"): dict(problem="test1_det", dt=[2.0], x0=[[-1.8], [1.0]], T=10.0),
    (1, "stoch"): dict(problem="test1_stoch", dt=[2.0], x0=[[1.0]], T=10.0),
    (2, "det"): dict(problem="test2", dt=[2.0, 0.001], schedule=[0.05, 0.0],
                     x0=[[-1.5], [1.0]], T=10.0),
    (3, "det"): dict(problem="test3_det", dt=[10.0], x0=[[1.0, 1.0, 1.0]], T=10.0),
    (3, "stoch"): dict(problem="test3_stoch", dt=[10.0], x0=[[1.0, 1.0, 1.0]], T=10.0),
    (4, "det"): dict(problem="test4", dt=[0.1], x0=[[-1.0, -1.0, -1.0]], T=15.0),
}


def cmd_reproduce(test_id: int, variant: str, out_dir: Path, eps: float = 1e-6,
                  seed: int = 0, n_paths: int = 1000) -> int:
    """Run one benchmark end to end and emit every figure-panel data file."""
    key = (test_id, variant)
    if key not in _REPRO:
        known = ", ".join(f"{t}/{v}" for t, v in sorted(_REPRO))
        print(f"error: no benchmark {test_id}/{variant}; choose from {known}",
              file=sys.stderr)
        return 1
    spec = _REPRO[key]
    p = builtin(spec["problem"])
    grid = grid_for(p)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, str] = {}
    panel = f"test{test_id}_{variant}"

    schedule = spec.get("schedule")
    results = {}
    for label, prob in (("constrained", p), ("unconstrained", unconstrained(p))):
        u0 = default_policy(prob, grid)
        if schedule:
            cfgs = [SchemeConfig(dt=dt) for dt in spec["dt"]]
            v, u, reports = warm_start_undiscount(
                replace(prob, discount=schedule[0]), schedule, cfgs,
                eps=eps, max_outer=200000, grid=grid, u0=u0)
            report = reports[-1]
        else:
            v, u, report = policy_iteration(prob, u0, SchemeConfig(dt=spec["dt"][0]),
                                            eps=eps, max_outer=200000)
        results[label] = (v, u, report)
        write_value_csv(out_dir / f"value_{label}.csv", grid, v, u)
        manifest[f"value_{label}.csv"] = f"{panel}: value function and control vs x ({label})"
        with open(out_dir / f"report_{label}.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        manifest[f"report_{label}.json"] = f"{panel}: iteration diagnostics ({label})"
        rep = hjb_residual(v, prob)
        write_residual_csv(out_dir / f"residual_{label}.csv", grid, rep.per_node)
        manifest[f"residual_{label}.csv"] = f"{panel}: pointwise stationary-equation defect ({label})"

    zero_policy = PolicyField(grid, np.zeros((grid.num_nodes, p.control_dim)))
    for x0 in spec["x0"]:
        tag = "_".join(_fmt(c) for c in x0)
        for label in ("constrained", "unconstrained"):
            traj = simulate_ode(p, results[label][1], x0, spec["T"], 1e-3)
            name = f"trajectory_{label}_{tag}.csv"
            write_trajectory_csv(out_dir / name, traj)
            manifest[name] = f"{panel}: closed-loop state/control/cost from x0={x0} ({label})"
        traj = simulate_ode(p, zero_policy, x0, spec["T"], 1e-3, stop_on_exit=False)
        name = f"trajectory_uncontrolled_{tag}.csv"
        write_trajectory_csv(out_dir / name, traj)
        manifest[name] = f"{panel}: uncontrolled flow from x0={x0}"
        if p.stochastic:
            for label in ("constrained", "unconstrained"):
                ens = simulate_sde(p, results[label][1], x0, spec["T"], 1e-3,
                                   n_paths=n_paths, seed=seed)
                name = f"ensemble_{label}_{tag}.csv"
                write_ensemble_csv(out_dir / name, ens)
                manifest[name] = f"{panel}: ensemble mean state/running cost ({label})"
            ens = simulate_sde(p, zero_policy, x0, spec["T"], 1e-3,
                               n_paths=n_paths, seed=seed)
            name = f"ensemble_uncontrolled_{tag}.csv"
            write_ensemble_csv(out_dir / name, ens)
            manifest[name] = f"{panel}: ensemble mean state/running cost (uncontrolled)"

    with open(out_dir / "manifest.json", "w") as fh:
        json.dump({"test": test_id, "variant": variant, "files": manifest}, fh, indent=2)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok]


def _ints(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hjbpi",
                                     description="Grid-based constrained HJB "
                                     "feedback synthesis by policy iteration")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="synthesize a feedback law")
    solve.add_argument("--problem", required=True,
                       help=f"builtin name ({', '.join(BUILTIN_NAMES)}) or JSON path")
    group = solve.add_mutually_exclusive_group()
    group.add_argument("--constrained", dest="constrained", action="store_true",
                       default=True)
    group.add_argument("--unconstrained", dest="constrained", action="store_false")
    solve.add_argument("--lambda", dest="lambda_schedule", type=_floats, default=[],
                       help="discount override, or comma schedule ending at 0")
    solve.add_argument("--dt", type=_floats, default=[2.0],
                       help="pseudo-time step, one per schedule stage")
    solve.add_argument("--eps", type=float, default=1e-6)
    solve.add_argument("--max-outer", type=int, default=20000)
    solve.add_argument("--mode", choices=["coupled", "frozen_policy"],
                       default="coupled")
    solve.add_argument("--grid-n", type=_ints, default=None,
                       help="node counts per dimension, comma separated")
    solve.add_argument("--out", type=Path, default=Path("."))

    sim = sub.add_parser("simulate", help="closed-loop trajectories from a solve")
    sim.add_argument("value_dir", type=Path, help="directory holding value.csv + report.json")
    sim.add_argument("--x0", action="append", type=_floats, default=[],
                     help="initial state (repeatable)")
    sim.add_argument("--horizon", type=float, default=10.0)
    sim.add_argument("--step", type=float, default=1e-3)
    sim.add_argument("--n-paths", type=int, default=None)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", type=Path, default=None)

    res = sub.add_parser("residual", help="stationary-equation defect of a solve")
    res.add_argument("value_dir", type=Path)
    res.add_argument("--gradient", choices=["central", "upwind"], default="central")
    res.add_argument("--out", type=Path, default=None)

    rep = sub.add_parser("reproduce", help="run a benchmark pipeline end to end")
    rep.add_argument("--test", type=int, required=True, choices=[1, 2, 3, 4])
    rep.add_argument("--variant", choices=["det", "stoch"], default="det")
    rep.add_argument("--eps", type=float, default=1e-6)
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--n-paths", type=int, default=1000)
    rep.add_argument("--out", type=Path, default=Path("reproduce"))
    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("HJB_PI_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        return
    os.environ.setdefault("OMP_NUM_THREADS", str(n))
    try:
        import numba
        numba.set_num_threads(n)
    except (ImportError, ValueError):
        pass


def main(argv=None) -> int:
    _apply_thread_cap()
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "solve":
            cfg = RunConfig(problem=args.problem, constrained=args.constrained,
                            lambda_schedule=args.lambda_schedule, dt=args.dt,
                            eps=args.eps, max_outer=args.max_outer, mode=args.mode,
                            grid_n=args.grid_n, out_dir=args.out)
            return cmd_solve(cfg)
        if args.command == "simulate":
            cfg = RunConfig(problem="", x0=args.x0, horizon=args.horizon,
                            step=args.step, n_paths=args.n_paths, seed=args.seed,
                            out_dir=args.out or args.value_dir)
            return cmd_simulate(cfg, args.value_dir)
        if args.command == "residual":
            cfg = RunConfig(problem="", out_dir=args.out or args.value_dir)
            return cmd_residual(cfg, args.value_dir, gradient=args.gradient)
        if args.command == "reproduce":
            return cmd_reproduce(args.test, args.variant, args.out, eps=args.eps,
                                 seed=args.seed, n_paths=args.n_paths)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())

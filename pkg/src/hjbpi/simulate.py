"""Closed-loop trajectory generation under a synthesized feedback field.

The stored per-node policy is evaluated between nodes by multilinear
interpolation followed by the box projection, so feedback values are
feasible everywhere.  Deterministic dynamics integrate with the classical
4-stage Runge-Kutta step; stochastic paths use Euler-Maruyama with
independent Gaussian increments per noise channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .control import PolicyField, project_box
from .problem import ProblemSpec


class SimulationError(ValueError):
    """Invalid simulation request."""


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray            # (n,)
    states: np.ndarray           # (n, d)
    controls: np.ndarray         # (n, m)
    running_cost: np.ndarray     # (n,) instantaneous l(x) + |u|_R^2
    accumulated_cost: np.ndarray  # (n,) discounted trapezoid integral
    exited: bool = False
    exit_time: float | None = None
    seed: int | None = None


@dataclass(frozen=True)
class Ensemble:
    times: np.ndarray
    paths: list[Trajectory]
    mean_state_cost: np.ndarray    # E|x(t)|^2 over paths, full step grid
    mean_running_cost: np.ndarray
    seed: int


class FeedbackLaw:
    """Interpolated, clamped evaluation of a policy field."""

    def __init__(self, u_field: PolicyField, p: ProblemSpec):
        grid = u_field.grid
        self.p = p
        self.lo = grid.lo
        self.hi = grid.hi
        values = u_field.u.reshape(grid.shape + (u_field.control_dim,))
        self._interp = RegularGridInterpolator(grid.axes(), values, method="linear")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        inside = np.clip(x, self.lo, self.hi)
        u = self._interp(inside)
        if x.ndim == 1:
            u = u[0]
        return project_box(u, self.p.u_min, self.p.u_max)


def feedback_at(x, u_field: PolicyField, p: ProblemSpec) -> np.ndarray:
    """Feedback control at a state: interpolate the policy, then project.

    States outside the domain are clamped to it for the lookup; the
    projection makes the returned control exactly feasible.
    """
    x = np.asarray(x, float)
    if not np.all(np.isfinite(x)):
        raise SimulationError(f"non-finite state {x}")
    law = FeedbackLaw(u_field, p)
    return law(x)


def _first_exit(states: np.ndarray, lo, hi) -> int | None:
    outside = np.any((states < lo) | (states > hi), axis=-1)
    hits = np.flatnonzero(outside)
    return int(hits[0]) if hits.size else None


def simulate_ode(p: ProblemSpec, u_field: PolicyField, x0, T: float, h: float,
                 stop_on_exit: bool = True) -> Trajectory:
    """Closed-loop deterministic trajectory by classical RK4.

    Costs accumulate as the trapezoid integral of exp(-lam t) (l + |u|_R^2).
    If the state leaves the domain box the trajectory is flagged with its
    exit time and, with stop_on_exit, truncated there (feedback lookups
    clamp to the box either way, so integration past the exit stays
    defined for divergence studies).
    """
    if h <= 0 or T < h:
        raise SimulationError("need h > 0 and T >= h")
    x0 = np.atleast_1d(np.asarray(x0, float))
    if x0.shape != (p.dim,):
        raise SimulationError(f"x0 must have dimension {p.dim}")
    law = FeedbackLaw(u_field, p)

    def rate(x):
        return p.drift(x) + p.input_map(x) @ law(x)

    n_steps = int(round(T / h))
    times = np.empty(n_steps + 1)
    states = np.empty((n_steps + 1, p.dim))
    controls = np.empty((n_steps + 1, p.control_dim))
    run = np.empty(n_steps + 1)
    x = x0.copy()
    last = n_steps
    for n in range(n_steps + 1):
        t = n * h
        u = law(x)
        times[n] = t
        states[n] = x
        controls[n] = u
        run[n] = float(p.state_cost(x)) + float(np.sum(p.control_weight * u * u))
        if n == n_steps:
            break
        k1 = rate(x)
        k2 = rate(x + 0.5 * h * k1)
        k3 = rate(x + 0.5 * h * k2)
        k4 = rate(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if stop_on_exit and np.any((x < p.lo) | (x > p.hi)):
            times[n + 1] = (n + 1) * h
            states[n + 1] = x
            u = law(x)
            controls[n + 1] = u
            run[n + 1] = float(p.state_cost(x)) + float(np.sum(p.control_weight * u * u))
            last = n + 1
            break
    times = times[:last + 1]
    states = states[:last + 1]
    controls = controls[:last + 1]
    run = run[:last + 1]
    exit_idx = _first_exit(states, p.lo, p.hi)
    weight = np.exp(-p.discount * times) * run
    acc = np.concatenate([[0.0], np.cumsum(0.5 * (weight[1:] + weight[:-1]) * np.diff(times))])
    return Trajectory(times=times, states=states, controls=controls,
                      running_cost=run, accumulated_cost=acc,
                      exited=exit_idx is not None,
                      exit_time=None if exit_idx is None else float(times[exit_idx]))


def simulate_sde(p: ProblemSpec, u_field: PolicyField, x0, T: float, h: float,
                 n_paths: int, seed: int,
                 record_stride: int | None = None) -> Ensemble:
    """Euler-Maruyama ensemble under the interpolated feedback.

    All paths share one generator seeded with ``seed``; reruns with the
    same (seed, n_paths, h) reproduce bit-identical ensembles.  Paths are
    never truncated (exit is flagged per path and lookups clamp), so
    uncontrolled divergence remains visible in the ensemble means, which
    are recorded on the full step grid.
    """
    if not p.stochastic:
        raise SimulationError(f"{p.name} has no noise map; use simulate_ode")
    if n_paths < 1:
        raise SimulationError("need n_paths >= 1")
    if h <= 0 or T < h:
        raise SimulationError("need h > 0 and T >= h")
    x0 = np.atleast_1d(np.asarray(x0, float))
    law = FeedbackLaw(u_field, p)
    rng = np.random.default_rng(seed)
    n_steps = int(round(T / h))
    stride = record_stride or max(1, n_steps // 1000)
    rec_idx = list(range(0, n_steps + 1, stride))
    if rec_idx[-1] != n_steps:
        rec_idx.append(n_steps)

    x = np.tile(x0, (n_paths, 1))
    times = np.arange(n_steps + 1) * h
    mean_state = np.empty(n_steps + 1)
    mean_run = np.empty(n_steps + 1)
    acc = np.zeros(n_paths)
    prev_weighted = None
    exit_step = np.full(n_paths, -1, dtype=int)
    rec_states = np.empty((len(rec_idx), n_paths, p.dim))
    rec_controls = np.empty((len(rec_idx), n_paths, p.control_dim))
    rec_run = np.empty((len(rec_idx), n_paths))
    rec_acc = np.empty((len(rec_idx), n_paths))
    rec_pos = {n: i for i, n in enumerate(rec_idx)}

    sqh = np.sqrt(h)
    for n in range(n_steps + 1):
        u = law(x)
        run = p.state_cost(x) + np.einsum("m,pm->p", p.control_weight, u * u)
        weighted = np.exp(-p.discount * times[n]) * run
        if prev_weighted is not None:
            acc += 0.5 * (weighted + prev_weighted) * h
        prev_weighted = weighted
        mean_state[n] = float(np.mean(np.sum(x * x, axis=-1)))
        mean_run[n] = float(np.mean(run))
        newly_out = (exit_step < 0) & np.any((x < p.lo) | (x > p.hi), axis=-1)
        exit_step[newly_out] = n
        if n in rec_pos:
            i = rec_pos[n]
            rec_states[i] = x
            rec_controls[i] = u
            rec_run[i] = run
            rec_acc[i] = acc
        if n == n_steps:
            break
        dw = sqh * rng.standard_normal((n_paths, p.noise_dim))
        drift = p.drift(x) + np.einsum("pdm,pm->pd", p.input_map(x), u)
        x = x + h * drift + np.einsum("pdk,pk->pd", p.noise_map(x), dw)

    rec_times = times[rec_idx]
    paths = []
    for j in range(n_paths):
        exited = exit_step[j] >= 0
        paths.append(Trajectory(
            times=rec_times, states=rec_states[:, j], controls=rec_controls[:, j],
            running_cost=rec_run[:, j], accumulated_cost=rec_acc[:, j],
            exited=bool(exited),
            exit_time=float(times[exit_step[j]]) if exited else None,
            seed=seed))
    return Ensemble(times=times, paths=paths, mean_state_cost=mean_state,
                    mean_running_cost=mean_run, seed=seed)

"""Independent references for acceptance checks.

For the 1-d linear-quadratic benchmark the discounted stationary equation
with V = p x^2 reduces to the scalar quadratic

    (b^2/R) p^2 + (lam - 2a) p - 1 = 0,

whose positive root is the exact quadratic coefficient; grid solves are
checked against it by least-squares fits over the unsaturated region, and
against their own fine-grid restrictions for self-convergence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid, make_grid
from .pde import SchemeConfig, ValueField
from .problem import ProblemSpec


class OracleError(ValueError):
    """Invalid oracle request."""


@dataclass(frozen=True)
class RiccatiRef:
    """Quadratic-coefficient reference for scalar dynamics a x + b u."""

    p_star: float
    a: float
    b: float
    weight: float   # control weight R
    lam: float

    def residual(self) -> float:
        """Back-substitution defect of the defining quadratic."""
        p = self.p_star
        return (self.b ** 2 / self.weight) * p * p + (self.lam - 2 * self.a) * p - 1.0


def riccati_1d(a: float, b: float, weight: float, lam: float = 0.0) -> RiccatiRef:
    """Positive root of (b^2/R) p^2 + (lam - 2a) p - 1 = 0."""
    if b == 0 or weight <= 0:
        raise OracleError("need b != 0 and a positive control weight")
    qa = b * b / weight
    qb = lam - 2.0 * a
    p = (-qb + np.sqrt(qb * qb + 4.0 * qa)) / (2.0 * qa)
    return RiccatiRef(p_star=float(p), a=a, b=b, weight=weight, lam=lam)


def fit_quadratic(v: ValueField, window: float) -> tuple[float, float]:
    """Least-squares fit v(x) ~ p x^2 over nodes |x| <= window (1-d only).

    Returns (p, max deviation |v - p x^2| relative to the fitted value at
    the window edge).
    """
    grid = v.grid
    if grid.dim != 1:
        raise OracleError("quadratic fit is for 1-d fields")
    x = grid.axis(0)
    mask = np.abs(x) <= window + 1e-12
    if mask.sum() < 5:
        raise OracleError(f"window {window} holds {int(mask.sum())} nodes; need >= 5")
    xs = x[mask]
    vs = v.v[mask]
    p = float(np.sum(vs * xs ** 2) / np.sum(xs ** 4))
    scale = max(abs(p) * window ** 2, 1e-300)
    dev = float(np.max(np.abs(vs - p * xs ** 2)) / scale)
    return p, dev


def fine_grid_reference(p: ProblemSpec, refine: int, cfg: SchemeConfig,
                        eps: float = 1e-6, max_outer: int = 10000,
                        n=None) -> ValueField:
    """Constrained solve on a refine-times-denser grid, restricted back.

    The fine solve keeps every coarse node (spacing divides exactly), so
    the restriction is plain subsampling and serves as a self-convergence
    reference for the first-order scheme.
    """
    from .policy import default_policy, grid_for, policy_iteration

    if refine not in (1, 2, 4):
        raise OracleError("refine must be 1, 2 or 4")
    coarse = grid_for(p, n)
    fine = make_grid(coarse.lo, coarse.hi, (coarse.n - 1) * refine + 1)
    v, _, _ = policy_iteration(p, default_policy(p, fine), cfg,
                               eps=eps, max_outer=max_outer)
    taker = tuple(slice(None, None, refine) for _ in range(coarse.dim))
    restricted = v.reshaped()[taker].ravel()
    return ValueField(coarse, restricted)

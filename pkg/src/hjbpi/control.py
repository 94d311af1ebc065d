"""Exact box projection of controls and the policy-improvement map.

For a diagonal control weight R the R-weighted projection onto the box
[u_min, u_max] is the coordinate-wise clamp, so the pointwise minimizer
of the Hamiltonian,  u*(x) = proj(-1/2 R^{-1} g(x)' grad V(x)),  is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid
from .problem import ProblemSpec


class ControlError(ValueError):
    """Invalid input to a control-map operation."""


@dataclass(frozen=True)
class PolicyField:
    """One control vector per grid node, flat row-major node order."""

    grid: Grid
    u: np.ndarray  # (num_nodes, control_dim)

    def __post_init__(self):
        u = np.asarray(self.u, float)
        if u.ndim != 2 or u.shape[0] != self.grid.num_nodes:
            raise ControlError("policy array must be (num_nodes, control_dim)")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @property
    def control_dim(self) -> int:
        return self.u.shape[1]


def project_box(z, u_min, u_max) -> np.ndarray:
    """Coordinate-wise clamp of z onto [u_min, u_max].

    Equals the R-weighted projection for any diagonal positive R.  Total
    on all inputs; bounds may be +-inf.
    """
    return np.minimum(u_max, np.maximum(u_min, np.asarray(z, float)))


def unconstrained_law(grad: np.ndarray, p: ProblemSpec, grid: Grid) -> np.ndarray:
    """Per-node minimizer -1/2 R^{-1} g(x)' grad V(x) before clamping."""
    g = p.input_map(grid.nodes())  # (nodes, d, m)
    gtgrad = np.einsum("ndm,nd->nm", g, grad)
    return -0.5 * gtgrad / p.control_weight


def policy_update(grad: np.ndarray, p: ProblemSpec, grid: Grid) -> PolicyField:
    """Policy improvement: clamp the unconstrained law onto the control box.

    ``grad`` holds a per-node value gradient, shape (num_nodes, dim); the
    caller chooses its discretization (the solver feeds the drift-sign
    upwind gradient so the policy stays consistent with the scheme).
    """
    grad = np.asarray(grad, float)
    if grad.shape != (grid.num_nodes, p.dim):
        raise ControlError(f"gradient must be (num_nodes, {p.dim})")
    if not np.all(np.isfinite(grad)):
        bad = int(np.argwhere(~np.isfinite(grad))[0][0])
        raise ControlError(f"non-finite gradient at node {bad}")
    z = unconstrained_law(grad, p, grid)
    return PolicyField(grid, project_box(z, p.u_min, p.u_max))

"""Uniform tensor-product grids over box domains.

Nodes are enumerated in row-major (C) order: the last dimension varies
fastest.  All fields in this package store one value per node in that
flat order, so ``field.reshape(grid.shape)`` recovers the tensor layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_DIM = 3


class GridError(ValueError):
    """Invalid grid construction or indexing."""


@dataclass(frozen=True)
class Grid:
    """Uniform grid on the box [lo, hi] with n nodes per dimension."""

    lo: np.ndarray
    hi: np.ndarray
    n: np.ndarray
    spacing: np.ndarray = field(init=False)

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        n = np.atleast_1d(np.asarray(self.n, dtype=int))
        if not (lo.shape == hi.shape == n.shape) or lo.ndim != 1:
            raise GridError("lo, hi and n must be 1-d and of equal length")
        if lo.size < 1 or lo.size > MAX_DIM:
            raise GridError(f"dimension must be 1..{MAX_DIM}, got {lo.size}")
        if np.any(hi <= lo):
            raise GridError("every hi must exceed the matching lo")
        if np.any(n < 3):
            raise GridError("need at least 3 nodes per dimension "
                            "(one-sided and second-difference stencils)")
        for name, arr in (("lo", lo), ("hi", hi), ("n", n)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        spacing = (hi - lo) / (n - 1)
        spacing.setflags(write=False)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.n)

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.n))

    def axis(self, k: int) -> np.ndarray:
        """Node coordinates along dimension k."""
        return self.lo[k] + self.spacing[k] * np.arange(self.n[k])

    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(self.axis(k) for k in range(self.dim))

    def node(self, idx) -> np.ndarray:
        """Coordinates of the node at multi-index idx."""
        idx = self._check_multi(idx)
        return self.lo + idx * self.spacing

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape (num_nodes, dim), row-major order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def flat_index(self, idx) -> int:
        idx = self._check_multi(idx)
        return int(np.ravel_multi_index(tuple(idx), self.shape))

    def multi_index(self, j: int) -> tuple[int, ...]:
        if not 0 <= j < self.num_nodes:
            raise GridError(f"flat index {j} out of range")
        return tuple(int(v) for v in np.unravel_index(j, self.shape))

    def origin_index(self) -> int:
        """Flat index of the node nearest the origin."""
        idx = np.clip(np.rint(-self.lo / self.spacing).astype(int), 0, self.n - 1)
        return int(np.ravel_multi_index(tuple(idx), self.shape))

    def origin_on_node(self, tol: float = 1e-12) -> bool:
        x0 = self.nodes()[self.origin_index()]
        return bool(np.all(np.abs(x0) <= tol * (1 + np.abs(self.hi - self.lo))))

    def _check_multi(self, idx) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        if idx.shape != (self.dim,):
            raise GridError(f"multi-index must have length {self.dim}")
        if np.any(idx < 0) or np.any(idx >= self.n):
            raise GridError(f"multi-index {tuple(idx)} out of range")
        return idx


def make_grid(lo, hi, n) -> Grid:
    """Build a uniform grid; spacing is (hi-lo)/(n-1) per dimension."""
    return Grid(np.asarray(lo, float), np.asarray(hi, float), np.asarray(n, int))


def classify(idx, g: Grid) -> tuple[tuple[int, str], ...]:
    """Faces touched by the node at multi-index idx.

    Returns an empty tuple for interior nodes, otherwise one (dimension,
    "low"|"high") pair per face the node lies on.
    """
    idx = g._check_multi(idx)
    faces = []
    for k in range(g.dim):
        if idx[k] == 0:
            faces.append((k, "low"))
        if idx[k] == g.n[k] - 1:
            faces.append((k, "high"))
    return tuple(faces)

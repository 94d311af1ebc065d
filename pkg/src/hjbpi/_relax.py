"""Gauss-Seidel sweep kernels for the multi-dimensional implicit step.

The linear systems are drift-upwinded 7-point stencils, so Gauss-Seidel
with alternating corner orderings behaves like fast sweeping: information
propagates along characteristics in a handful of sweeps.  Kernels are
compiled with numba; V is updated in place.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# the eight corner orderings of a 3-d sweep
ORDERINGS = (
    (1, 1, 1), (-1, -1, -1), (1, -1, -1), (-1, 1, 1),
    (1, 1, -1), (-1, -1, 1), (1, -1, 1), (-1, 1, -1),
)


@njit(cache=True)
def gs_sweep(V, diag, cl0, cu0, cl1, cu1, cl2, cu2, rhs, d0, d1, d2):
    n0, n1, n2 = V.shape
    for ii in range(n0):
        i = ii if d0 > 0 else n0 - 1 - ii
        for jj in range(n1):
            j = jj if d1 > 0 else n1 - 1 - jj
            for kk in range(n2):
                k = kk if d2 > 0 else n2 - 1 - kk
                acc = rhs[i, j, k]
                if i > 0:
                    acc -= cl0[i, j, k] * V[i - 1, j, k]
                if i < n0 - 1:
                    acc -= cu0[i, j, k] * V[i + 1, j, k]
                if j > 0:
                    acc -= cl1[i, j, k] * V[i, j - 1, k]
                if j < n1 - 1:
                    acc -= cu1[i, j, k] * V[i, j + 1, k]
                if k > 0:
                    acc -= cl2[i, j, k] * V[i, j, k - 1]
                if k < n2 - 1:
                    acc -= cu2[i, j, k] * V[i, j, k + 1]
                V[i, j, k] = acc / diag[i, j, k]


@njit(cache=True)
def residual_inf(V, diag, cl0, cu0, cl1, cu1, cl2, cu2, rhs):
    n0, n1, n2 = V.shape
    worst = 0.0
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                acc = diag[i, j, k] * V[i, j, k] - rhs[i, j, k]
                if i > 0:
                    acc += cl0[i, j, k] * V[i - 1, j, k]
                if i < n0 - 1:
                    acc += cu0[i, j, k] * V[i + 1, j, k]
                if j > 0:
                    acc += cl1[i, j, k] * V[i, j - 1, k]
                if j < n1 - 1:
                    acc += cu1[i, j, k] * V[i, j + 1, k]
                if k > 0:
                    acc += cl2[i, j, k] * V[i, j, k - 1]
                if k < n2 - 1:
                    acc += cu2[i, j, k] * V[i, j, k + 1]
                if abs(acc) > worst:
                    worst = abs(acc)
    return worst

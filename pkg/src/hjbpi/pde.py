"""Discretization and linear solves for policy evaluation.

One pseudo-time step solves the implicit system

    (V - V_prev)/dt + lam*V - gradV_upwind . (f + g u)
        - 1/2 sum_j g1_j' D2V g1_j - l(x) - |u|_R^2 = 0

for V with the policy u frozen.  Gradients are one-sided per dimension,
picked by the sign of the frozen drift (forward difference for positive
drift, backward for negative), which makes every interior row an
M-matrix row:  diag = 1/dt + lam + sum_k |s_k|/dx_k + diffusion, with
nonpositive off-diagonals.  Marching the step to stationarity solves the
linear policy-evaluation equation; the solvers are a banded direct solve
in 1-d and alternating-direction Gauss-Seidel sweeps otherwise.

Boundary rows use the interior-pointing one-sided difference regardless
of drift sign ("one_sided", the default), or are pinned to their incoming
values ("dirichlet_warm", used for undiscounted stages warm-started from
a discounted solve, where the value at non-stabilizable boundary nodes
genuinely diverges).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.linalg import solve_banded

from . import _relax
from .control import PolicyField, project_box, unconstrained_law
from .grid import Grid
from .problem import ProblemSpec

DIVERGENCE_LIMIT = 1e12


class PdeError(RuntimeError):
    """Base class for solver failures."""


class AssemblyError(PdeError):
    """The assembled system violates the monotone-row structure."""


class RelaxationError(PdeError):
    """Relaxation sweeps failed to reach the residual tolerance."""


class DivergenceError(PdeError):
    """The value iteration blew up (inadmissible policy or bad dt)."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


@dataclass(frozen=True)
class ValueField:
    """One scalar value per grid node, flat row-major node order."""

    grid: Grid
    v: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, float)
        if v.shape != (self.grid.num_nodes,):
            raise PdeError("value array must be flat with one entry per node")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    def reshaped(self) -> np.ndarray:
        return self.v.reshape(self.grid.shape)


def zero_value(grid: Grid) -> ValueField:
    return ValueField(grid, np.zeros(grid.num_nodes))


@dataclass(frozen=True)
class SchemeConfig:
    """Numerical controls for the implicit upwind scheme.

    dt          pseudo-time step.
    inner_tol   stationarity threshold: stop the value march once
                sup|V_new - V_old| <= inner_tol * (1 + sup|V_new|).
    inner_max   cap on pseudo-time steps per policy evaluation.
    mode        "coupled" refreshes the policy after every pseudo-time
                step; "frozen_policy" marches each policy to stationarity
                before improving it.
    relax_tol   multi-d linear-solve residual target, relative to the
                right-hand-side scale.
    relax_max   cap on relaxation sweeps per step.
    boundary    "one_sided" or "dirichlet_warm" (see module docstring).
    """

    dt: float = 2.0
    inner_tol: float = 1e-8
    inner_max: int = 50000
    mode: Literal["coupled", "frozen_policy"] = "coupled"
    relax_tol: float = 1e-10
    relax_max: int = 20000
    boundary: Literal["one_sided", "dirichlet_warm"] = "one_sided"

    def __post_init__(self):
        if self.dt <= 0:
            raise PdeError("dt must be positive")
        if self.inner_tol <= 0 or self.relax_tol <= 0:
            raise PdeError("tolerances must be positive")
        if self.mode not in ("coupled", "frozen_policy"):
            raise PdeError(f"unknown mode {self.mode!r}")
        if self.boundary not in ("one_sided", "dirichlet_warm"):
            raise PdeError(f"unknown boundary rule {self.boundary!r}")


@dataclass(frozen=True)
class InnerStats:
    steps: int
    converged: bool
    final_change: float


# ---------------------------------------------------------------------------
# cached node-table evaluation of the problem data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Tables:
    nodes: np.ndarray      # (N, d)
    drift: np.ndarray      # (N, d)
    gain: np.ndarray       # (N, d, m)
    cost: np.ndarray       # (N,)
    diff: np.ndarray       # (N, d)  1/2 sum_j g1[k,j]^2, zeros if deterministic


_TABLE_CACHE: dict[tuple[int, int], _Tables] = {}


def _tables(p: ProblemSpec, grid: Grid) -> _Tables:
    key = (id(p), id(grid))
    hit = _TABLE_CACHE.get(key)
    if hit is not None:
        return hit
    x = grid.nodes()
    diff = np.zeros((grid.num_nodes, p.dim))
    if p.noise_map is not None:
        g1 = p.noise_map(x)
        diff = 0.5 * np.sum(np.asarray(g1, float) ** 2, axis=-1)
    tab = _Tables(nodes=x, drift=np.asarray(p.drift(x), float),
                  gain=np.asarray(p.input_map(x), float),
                  cost=np.asarray(p.state_cost(x), float), diff=diff)
    if len(_TABLE_CACHE) > 32:
        _TABLE_CACHE.clear()
    _TABLE_CACHE[key] = tab
    return tab


def _drift_with(tab: _Tables, u: np.ndarray) -> np.ndarray:
    return tab.drift + np.einsum("ndm,nm->nd", tab.gain, u)


def _one_sided_diffs(vg: np.ndarray, grid: Grid) -> tuple[list, list]:
    """Forward and backward differences per dimension on the grid array.

    At faces the missing side reuses the interior-pointing difference.
    """
    fwd, bwd = [], []
    for k in range(grid.dim):
        dx = grid.spacing[k]
        d = np.diff(vg, axis=k) / dx
        lead = [slice(None)] * grid.dim
        trail = [slice(None)] * grid.dim
        lead[k] = slice(0, 1)
        trail[k] = slice(-1, None)
        df = np.concatenate([d, d[tuple(trail)]], axis=k)
        db = np.concatenate([d[tuple(lead)], d], axis=k)
        fwd.append(df)
        bwd.append(db)
    return fwd, bwd


def _sonic_value(p: ProblemSpec, tab: _Tables, df: np.ndarray, db: np.ndarray,
                 k: int, grid: Grid) -> np.ndarray:
    """Gradient assigned where neither one-sided drift test selects a side.

    In 1-d with a scalar input map this is the value consistent with the
    drift-cancelling control ubar = -f/g, i.e. -2 R ubar / g; otherwise the
    central difference (the two coincide at faces).
    """
    central = 0.5 * (df + db)
    if p.dim == 1 and p.control_dim == 1:
        g = tab.gain[:, 0, 0].reshape(grid.shape)
        f = tab.drift[:, 0].reshape(grid.shape)
        safe = g != 0.0
        ubar = np.where(safe, -f / np.where(safe, g, 1.0), 0.0)
        return np.where(safe, -2.0 * p.control_weight[0] * ubar
                        / np.where(safe, g, 1.0), central)
    return central


def upwind_gradient(v: ValueField, u: PolicyField, p: ProblemSpec) -> np.ndarray:
    """Drift-sign upwind gradient of v under the given policy.

    Per dimension: forward difference where the drift component is
    positive, backward where negative, and the sonic value where it
    vanishes.  Faces fall back to the interior-pointing difference.
    Returns shape (num_nodes, dim).
    """
    grid = v.grid
    if u.grid is not grid and u.grid != grid:
        raise PdeError("value and policy must share a grid")
    if not np.all(np.isfinite(v.v)) or not np.all(np.isfinite(u.u)):
        raise PdeError("non-finite field values")
    tab = _tables(p, grid)
    s = _drift_with(tab, u.u)
    vg = v.reshaped()
    fwd, bwd = _one_sided_diffs(vg, grid)
    out = np.empty((grid.num_nodes, grid.dim))
    for k in range(grid.dim):
        sk = s[:, k].reshape(grid.shape)
        sonic = _sonic_value(p, tab, fwd[k], bwd[k], k, grid)
        gk = np.where(sk > 0, fwd[k], np.where(sk < 0, bwd[k], sonic))
        out[:, k] = gk.ravel()
    return out


def upwind_gradient_induced(v: ValueField, p: ProblemSpec) -> np.ndarray:
    """Upwind gradient with the stencil chosen by its own induced policy.

    For each dimension the candidate one-sided difference is accepted when
    the drift computed from the policy that difference induces points the
    matching way (forward difference if it drives the state upward,
    backward if downward); when the two tests bracket zero the sonic value
    is used.  This is the gradient fed to policy improvement.
    """
    grid = v.grid
    if not np.all(np.isfinite(v.v)):
        raise PdeError("non-finite field values")
    tab = _tables(p, grid)
    vg = v.reshaped()
    fwd, bwd = _one_sided_diffs(vg, grid)
    base = np.stack([0.5 * (fwd[k] + bwd[k]).ravel() for k in range(grid.dim)],
                    axis=-1)

    def drift_k(grad_col: np.ndarray, k: int) -> np.ndarray:
        g = base.copy()
        g[:, k] = grad_col.ravel()
        u = project_box(unconstrained_law(g, p, grid), p.u_min, p.u_max)
        return _drift_with(tab, u)[:, k].reshape(grid.shape)

    out = np.empty((grid.num_nodes, grid.dim))
    for k in range(grid.dim):
        s_f = drift_k(fwd[k], k)
        s_b = drift_k(bwd[k], k)
        take_f = s_f > 0
        take_b = s_b < 0
        both = take_f & take_b  # local concavity: keep the stronger side
        take_f &= ~both | (np.abs(s_f) >= np.abs(s_b))
        take_b &= ~take_f
        sonic = _sonic_value(p, tab, fwd[k], bwd[k], k, grid)
        gk = np.where(take_f, fwd[k], np.where(take_b, bwd[k], sonic))
        out[:, k] = gk.ravel()
    return out


def diffusion_term(v: ValueField, p: ProblemSpec, idx) -> float:
    """1/2 sum_j g1_j' D2v g1_j at one node by central second differences.

    Zero for deterministic problems.  Raises at boundary nodes, where the
    central stencil leaves the grid (assembly uses one-sided stencils
    there instead).
    """
    grid = v.grid
    midx = np.asarray(grid._check_multi(idx))
    if p.noise_map is None:
        return 0.0
    if np.any(midx == 0) or np.any(midx == grid.n - 1):
        raise PdeError(f"central second-difference stencil leaves the grid at {tuple(midx)}")
    tab = _tables(p, grid)
    j = grid.flat_index(midx)
    total = 0.0
    for k in range(grid.dim):
        a = tab.diff[j, k]
        if a == 0.0:
            continue
        step = np.zeros(grid.dim, dtype=int)
        step[k] = 1
        up = grid.flat_index(midx + step)
        dn = grid.flat_index(midx - step)
        d2 = (v.v[up] - 2.0 * v.v[j] + v.v[dn]) / grid.spacing[k] ** 2
        total += a * d2
    return float(total)


# ---------------------------------------------------------------------------
# assembly of one implicit step
# ---------------------------------------------------------------------------

@dataclass
class _Assembly:
    diag: np.ndarray
    lower: list[np.ndarray]          # coefficient of the -e_k neighbor
    upper: list[np.ndarray]          # coefficient of the +e_k neighbor
    rhs: np.ndarray
    skip2: list[tuple]               # (target slice, source slice, coeff) +2 couplings
    face_mask: np.ndarray


def _face_mask(grid: Grid) -> np.ndarray:
    mask = np.zeros(grid.shape, dtype=bool)
    for k in range(grid.dim):
        sl = [slice(None)] * grid.dim
        sl[k] = 0
        mask[tuple(sl)] = True
        sl[k] = -1
        mask[tuple(sl)] = True
    return mask


def _assemble(v_prev: np.ndarray, u: np.ndarray, p: ProblemSpec, grid: Grid,
              cfg: SchemeConfig) -> _Assembly:
    tab = _tables(p, grid)
    shape = grid.shape
    lam = p.discount
    s = _drift_with(tab, u)

    diag = np.full(shape, 1.0 / cfg.dt + lam)
    rhs = (v_prev / cfg.dt + tab.cost
           + np.einsum("m,nm->n", p.control_weight, u * u)).reshape(shape)
    lower = [np.zeros(shape) for _ in range(grid.dim)]
    upper = [np.zeros(shape) for _ in range(grid.dim)]
    skip2: list[tuple] = []

    def axis_slice(k, which):
        sl = [slice(None)] * grid.dim
        sl[k] = which
        return tuple(sl)

    for k in range(grid.dim):
        dx = grid.spacing[k]
        sk = s[:, k].reshape(shape)
        has_up = np.ones(shape, dtype=bool)
        has_dn = np.ones(shape, dtype=bool)
        has_up[axis_slice(k, -1)] = False
        has_dn[axis_slice(k, 0)] = False
        use_f = (sk > 0) & has_up
        use_b = (sk < 0) & has_dn
        # faces keep the interior-pointing difference regardless of sign
        use_f |= ~has_dn & (sk != 0)
        use_b |= ~has_up & (sk != 0)
        diag += np.where(use_f, sk / dx, 0.0) - np.where(use_b, sk / dx, 0.0)
        upper[k] -= np.where(use_f, sk / dx, 0.0)
        lower[k] += np.where(use_b, sk / dx, 0.0)

        # diffusion only where the central stencil exists: a one-sided face
        # second difference feeds the face row its own boundary-layer
        # curvature and destabilizes the march wherever a/dx^2 > 1/dt + lam
        a = tab.diff[:, k].reshape(shape) / dx ** 2
        if np.any(a):
            inner = has_up & has_dn
            diag += np.where(inner, 2.0 * a, 0.0)
            lower[k] -= np.where(inner, a, 0.0)
            upper[k] -= np.where(inner, a, 0.0)

    fmask = _face_mask(grid)
    if cfg.boundary == "dirichlet_warm":
        diag[fmask] = 1.0
        rhs[fmask] = v_prev.reshape(shape)[fmask]
        for k in range(grid.dim):
            lower[k][fmask] = 0.0
            upper[k][fmask] = 0.0
        skip2 = []

    asm = _Assembly(diag, lower, upper, rhs, skip2, fmask)
    _check_m_matrix(asm, grid, lam, cfg.dt)
    return asm


def _check_m_matrix(asm: _Assembly, grid: Grid, lam: float, dt: float) -> None:
    """Interior rows must be strictly diagonally dominant M-matrix rows."""
    interior = ~asm.face_mask
    off_sum = np.zeros(grid.shape)
    for k in range(grid.dim):
        pos = ((asm.lower[k] > 0) | (asm.upper[k] > 0)) & interior
        if np.any(pos):
            node = int(np.flatnonzero(pos.ravel())[0])
            raise AssemblyError(f"positive off-diagonal at interior node {node}, dim {k}")
        off_sum += np.abs(asm.lower[k]) + np.abs(asm.upper[k])
    bad_diag = (asm.diag <= 0) & interior
    if np.any(bad_diag):
        node = int(np.flatnonzero(bad_diag.ravel())[0])
        raise AssemblyError(f"nonpositive diagonal at interior node {node}")
    slack = asm.diag - (off_sum + lam + 1.0 / dt)
    bad = (slack < -1e-9 * (1.0 + np.abs(asm.diag))) & interior
    if np.any(bad):
        node = int(np.flatnonzero(bad.ravel())[0])
        raise AssemblyError(f"diagonal dominance violated at interior node {node}")


def _apply(asm: _Assembly, V: np.ndarray) -> np.ndarray:
    """Matrix-vector product of the assembled operator on the grid array."""
    out = asm.diag * V
    dim = V.ndim
    for k in range(dim):
        up_t = [slice(None)] * dim
        up_t[k] = slice(0, -1)
        up_s = [slice(None)] * dim
        up_s[k] = slice(1, None)
        out[tuple(up_t)] += asm.upper[k][tuple(up_t)] * V[tuple(up_s)]
        out[tuple(up_s)] += asm.lower[k][tuple(up_s)] * V[tuple(up_t)]
    for target, source, coeff in asm.skip2:
        out[target] += coeff * V[source]
    return out


def _solve_1d(asm: _Assembly, grid: Grid) -> np.ndarray:
    n = grid.num_nodes
    diag = asm.diag.ravel()
    lo = asm.lower[0].ravel()
    up = asm.upper[0].ravel()
    if asm.skip2:
        # one-sided face diffusion couples each face to two inward nodes
        ab = np.zeros((5, n))
        ab[1, 1:] = up[:-1]
        ab[2] = diag
        ab[3, :-1] = lo[1:]
        idx = np.arange(n)
        for target, source, coeff in asm.skip2:
            row = int(idx[target])
            col = int(idx[source])
            ab[2 + row - col, col] = float(np.asarray(coeff))
        return solve_banded((2, 2), ab, asm.rhs.ravel())
    ab = np.zeros((3, n))
    ab[0, 1:] = up[:-1]
    ab[1] = diag
    ab[2, :-1] = lo[1:]
    return solve_banded((1, 1), ab, asm.rhs.ravel())


def _pad3(arr: np.ndarray) -> np.ndarray:
    while arr.ndim < 3:
        arr = arr[..., None]
    return arr


def _solve_relax(asm: _Assembly, grid: Grid, v_start: np.ndarray,
                 cfg: SchemeConfig) -> np.ndarray:
    """Alternating-direction Gauss-Seidel sweeps, warm started.

    Sweeping resolves drift-aligned couplings in a few passes; when the
    flow spirals the asymptotic rate can stall, in which case the step
    falls back to an ILU-preconditioned Krylov solve of the same system.
    """
    V = _pad3(v_start.reshape(grid.shape).copy())
    diag = _pad3(asm.diag)
    coeffs = [_pad3(asm.lower[k]) for k in range(grid.dim)]
    coeffs += [np.zeros_like(diag) for _ in range(3 - grid.dim)]
    upps = [_pad3(asm.upper[k]) for k in range(grid.dim)]
    upps += [np.zeros_like(diag) for _ in range(3 - grid.dim)]
    cl0, cl1, cl2 = coeffs
    cu0, cu1, cu2 = upps
    rhs0 = asm.rhs
    scale = 1.0 + float(np.abs(rhs0).max())
    tol = cfg.relax_tol * scale

    def rhs_eff() -> np.ndarray:
        if not asm.skip2:
            return _pad3(rhs0)
        r = rhs0.copy()
        Vg = V.reshape(grid.shape)
        for target, source, coeff in asm.skip2:
            r[target] = rhs0[target] - coeff * Vg[source]
        return _pad3(r)

    fingerprint = _operator_fingerprint(asm)
    cached = _ILU_CACHE.get(fingerprint)
    if cached is None or not cached.prefer_krylov:
        r = rhs_eff()
        res = math.inf
        trail = math.inf
        for sweep in range(cfg.relax_max):
            d = _relax.ORDERINGS[sweep % len(_relax.ORDERINGS)]
            _relax.gs_sweep(V, diag, cl0, cu0, cl1, cu1, cl2, cu2, r, *d)
            if asm.skip2:
                r = rhs_eff()
            res = _relax.residual_inf(V, diag, cl0, cu0, cl1, cu1, cl2, cu2, r)
            if res <= tol:
                return V.reshape(grid.shape)
            if sweep % 200 == 199:
                if res > 0.25 * trail:
                    break  # stagnating (spiraling drift): go Krylov
                trail = res
    return _solve_krylov(asm, grid, V.reshape(grid.shape).ravel(), tol,
                         fingerprint)


@dataclass
class _CachedOperator:
    matrix: object
    solve: object
    prefer_krylov: bool = True


_ILU_CACHE: dict[bytes, _CachedOperator] = {}


def _operator_fingerprint(asm: _Assembly) -> bytes:
    import hashlib

    h = hashlib.blake2b(digest_size=16)
    h.update(asm.diag.tobytes())
    for arr in (*asm.lower, *asm.upper):
        h.update(arr.tobytes())
    return h.digest()


def _sparse_operator(asm: _Assembly, grid: Grid):
    from scipy.sparse import csc_matrix

    n = grid.num_nodes
    idx = np.arange(n).reshape(grid.shape)
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [asm.diag.ravel()]
    for k in range(grid.dim):
        lead = [slice(None)] * grid.dim
        lead[k] = slice(1, None)
        trail = [slice(None)] * grid.dim
        trail[k] = slice(0, -1)
        rows.append(idx[tuple(lead)].ravel())
        cols.append(idx[tuple(trail)].ravel())
        vals.append(asm.lower[k][tuple(lead)].ravel())
        rows.append(idx[tuple(trail)].ravel())
        cols.append(idx[tuple(lead)].ravel())
        vals.append(asm.upper[k][tuple(trail)].ravel())
    for target, source, coeff in asm.skip2:
        rows.append(np.atleast_1d(idx[target]).ravel())
        cols.append(np.atleast_1d(idx[source]).ravel())
        vals.append(np.atleast_1d(coeff).ravel())
    return csc_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))


def _solve_krylov(asm: _Assembly, grid: Grid, v_start: np.ndarray,
                  tol: float, fingerprint: bytes) -> np.ndarray:
    """ILU-preconditioned BiCGStab on the exact operator; the factorization
    is cached by content hash, so repeated steps with a frozen policy pay
    for it once."""
    from scipy.sparse.linalg import LinearOperator, bicgstab, spilu

    cached = _ILU_CACHE.get(fingerprint)
    if cached is None:
        a_mat = _sparse_operator(asm, grid)
        try:
            ilu = spilu(a_mat, drop_tol=1e-5, fill_factor=30)
        except RuntimeError as exc:
            raise RelaxationError(f"fallback factorization failed: {exc}") from exc
        if len(_ILU_CACHE) > 8:
            _ILU_CACHE.clear()
        cached = _CachedOperator(matrix=a_mat, solve=ilu.solve)
        _ILU_CACHE[fingerprint] = cached
    a_mat = cached.matrix
    n = grid.num_nodes
    rhs = asm.rhs.ravel()
    precond = LinearOperator((n, n), cached.solve)
    x, info = bicgstab(a_mat, rhs, x0=v_start, M=precond,
                       rtol=1e-14, atol=0.2 * tol, maxiter=600)
    res = float(np.abs(a_mat @ x - rhs).max())
    if info != 0 or res > tol:
        raise RelaxationError(
            f"linear solve stalled (Krylov residual {res:.3e}, tol {tol:.3e}); "
            "dt may be too large for this drift")
    return x.reshape(grid.shape)


def implicit_step(v_prev: ValueField, u: PolicyField, p: ProblemSpec,
                  cfg: SchemeConfig) -> ValueField:
    """One implicit pseudo-time step with the policy frozen.

    Drift signs, and with them the upwind stencils, come from (v_prev, u),
    so the solved system is linear in the new value field.
    """
    grid = v_prev.grid
    asm = _assemble(v_prev.v, u.u, p, grid, cfg)
    if grid.dim == 1:
        out = _solve_1d(asm, grid)
    else:
        out = _solve_relax(asm, grid, v_prev.v, cfg).ravel()
    return ValueField(grid, out)


def ghjb_solve(v_init: ValueField, u: PolicyField, p: ProblemSpec,
               cfg: SchemeConfig) -> tuple[ValueField, InnerStats]:
    """Policy evaluation: march implicit steps to stationarity, u frozen.

    Stops once sup|V_new - V_old| <= inner_tol*(1 + sup|V_new|) or after
    inner_max steps (reported, not fatal).  Divergence past 1e12 raises,
    naming the worst node; it signals an inadmissible policy.  For
    undiscounted problems the result is re-pinned to zero at the origin
    node, which fixes the free constant of the pure-transport system.
    """
    grid = v_init.grid
    v = v_init
    change = math.inf
    converged = False
    steps = 0
    for steps in range(1, cfg.inner_max + 1):
        v_new = implicit_step(v, u, p, cfg)
        change = float(np.abs(v_new.v - v.v).max())
        v = v_new
        worst = float(np.abs(v.v).max())
        if worst > DIVERGENCE_LIMIT:
            node = int(np.abs(v.v).argmax())
            raise DivergenceError(
                f"value iteration diverged (sup {worst:.2e} at node {node}, "
                f"x={v.grid.nodes()[node]})", node=node)
        if change <= cfg.inner_tol * (1.0 + worst):
            converged = True
            break
    if p.discount == 0.0:
        v = ValueField(grid, v.v - v.v[grid.origin_index()])
    return v, InnerStats(steps=steps, converged=converged, final_change=change)

"""Problem definitions: dynamics, costs, constraints, discounting.

A problem couples control-affine dynamics  dx = (f(x) + g(x) u) dt + g1(x) dW
with the running cost  l(x) + u' R u, bilateral control bounds
u_min <= u <= u_max, and an exponential discount rate.  The four builtin
benchmarks cover a 1-d linear plant (deterministic and noisy), a 1-d
bistable plant, the Lorenz linearization at the origin (deterministic and
noisy), and the full Lorenz system.
"""

from __future__ import annotations

import ast
import json
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

BOUND_TOL = 1e-12


class ProblemError(ValueError):
    """Invalid problem definition or usage."""


@dataclass(frozen=True)
class ProblemSpec:
    """Control-affine stochastic control problem on a box domain.

    All maps are vectorized: they accept states of shape (..., dim) and
    return drift (..., dim), input map (..., dim, control_dim), noise map
    (..., dim, noise_dim) and state cost (...).  ``noise_map`` is None for
    deterministic problems.  ``control_weight`` holds the diagonal of R;
    the box projection is exact only for diagonal R.  ``additive_noise``
    waives the g1(0)=0 check for benchmarks driven by constant noise.
    """

    name: str
    dim: int
    control_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    input_map: Callable[[np.ndarray], np.ndarray]
    state_cost: Callable[[np.ndarray], np.ndarray]
    control_weight: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    discount: float
    lo: np.ndarray
    hi: np.ndarray
    default_n: np.ndarray
    noise_map: Callable[[np.ndarray], np.ndarray] | None = None
    noise_dim: int = 0
    additive_noise: bool = False

    def __post_init__(self):
        for name in ("control_weight", "u_min", "u_max", "lo", "hi", "default_n"):
            arr = np.atleast_1d(np.asarray(getattr(self, name),
                                           int if name == "default_n" else float))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.control_weight.shape != (self.control_dim,):
            raise ProblemError("control_weight must hold one diagonal entry per control")
        if np.any(self.control_weight <= 0):
            raise ProblemError("control weights must be strictly positive")
        if np.any(self.u_min > 0) or np.any(self.u_max < 0):
            raise ProblemError("control box must contain 0 (u_min <= 0 <= u_max)")
        if self.lo.shape != (self.dim,) or self.hi.shape != (self.dim,):
            raise ProblemError("domain bounds must match the state dimension")

    @property
    def stochastic(self) -> bool:
        return self.noise_map is not None

    def validate(self, n_samples: int = 64, seed: int = 0) -> None:
        """Spot-check equilibrium and positivity conventions by sampling."""
        origin = np.zeros(self.dim)
        if np.max(np.abs(self.drift(origin))) > BOUND_TOL:
            raise ProblemError(f"{self.name}: drift(0) != 0")
        if abs(float(self.state_cost(origin))) > BOUND_TOL:
            raise ProblemError(f"{self.name}: state_cost(0) != 0")
        if self.stochastic and not self.additive_noise:
            if np.max(np.abs(self.noise_map(origin))) > BOUND_TOL:
                raise ProblemError(f"{self.name}: noise_map(0) != 0")
        rng = np.random.default_rng(seed)
        x = rng.uniform(self.lo, self.hi, size=(n_samples, self.dim))
        x = x[np.linalg.norm(x, axis=1) > 1e-6]
        if np.any(self.state_cost(x) <= 0):
            raise ProblemError(f"{self.name}: state_cost must be positive away from 0")


def eval_dynamics(p: ProblemSpec, x, u) -> np.ndarray:
    """Closed-loop state derivative f(x) + g(x) u."""
    x = np.asarray(x, float)
    u = np.atleast_1d(np.asarray(u, float))
    if np.any(u < p.u_min - BOUND_TOL) or np.any(u > p.u_max + BOUND_TOL):
        raise ProblemError(f"control {u} violates bounds [{p.u_min}, {p.u_max}] "
                           "- projection upstream is broken")
    return p.drift(x) + p.input_map(x) @ u


def running_cost(p: ProblemSpec, x, u) -> float:
    """Instantaneous cost rate l(x) + u' R u."""
    u = np.atleast_1d(np.asarray(u, float))
    return float(p.state_cost(np.asarray(x, float))) + float(np.sum(p.control_weight * u * u))


def unconstrained(p: ProblemSpec) -> ProblemSpec:
    """Same problem with the control box widened to all of R^m."""
    return replace(p,
                   u_min=np.full(p.control_dim, -np.inf),
                   u_max=np.full(p.control_dim, np.inf))


def _const_input_map(matrix: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    matrix = np.asarray(matrix, float)

    def input_map(x):
        x = np.asarray(x, float)
        return np.broadcast_to(matrix, x.shape[:-1] + matrix.shape).copy()

    return input_map


def _quadratic_cost(x):
    return np.sum(np.asarray(x, float) ** 2, axis=-1)


def _test1(noise: float | None) -> ProblemSpec:
    def drift(x):
        return 0.5 * np.asarray(x, float)

    kwargs = {}
    if noise is not None:
        kwargs = dict(noise_map=_const_input_map(np.array([[noise]])),
                      noise_dim=1, additive_noise=True)
    return ProblemSpec(
        name="test1_stoch" if noise is not None else "test1_det",
        dim=1, control_dim=1,
        drift=drift,
        input_map=_const_input_map(np.array([[1.0]])),
        state_cost=_quadratic_cost,
        control_weight=[0.1], u_min=[-1.0], u_max=[1.0],
        discount=0.05, lo=[-2.0], hi=[2.0], default_n=[401],
        **kwargs)


def _test2() -> ProblemSpec:
    def drift(x):
        x = np.asarray(x, float)
        return x - x ** 3

    # discount 0: solved by warm-starting from a discounted stage
    return ProblemSpec(
        name="test2",
        dim=1, control_dim=1,
        drift=drift,
        input_map=_const_input_map(np.array([[1.0]])),
        state_cost=_quadratic_cost,
        control_weight=[0.1], u_min=[-1.0], u_max=[1.0],
        discount=0.0, lo=[-2.0], hi=[2.0], default_n=[401])


LORENZ_SIGMA = 10.0
LORENZ_BETA = 8.0 / 3.0
TEST3_RHO = 1.1
TEST4_RHO = 2.0


def _test3(noise: float | None) -> ProblemSpec:
    sigma, rho, beta = LORENZ_SIGMA, TEST3_RHO, LORENZ_BETA

    def drift(x):
        x = np.asarray(x, float)
        return np.stack([sigma * (x[..., 1] - x[..., 0]),
                         rho * x[..., 0] - x[..., 1],
                         -beta * x[..., 2]], axis=-1)

    g = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    kwargs = {}
    if noise is not None:
        g1 = np.array([[0.0, 0.0], [noise, 0.0], [0.0, noise]])
        kwargs = dict(noise_map=_const_input_map(g1), noise_dim=2,
                      additive_noise=True)
    return ProblemSpec(
        name="test3_stoch" if noise is not None else "test3_det",
        dim=3, control_dim=2,
        drift=drift,
        input_map=_const_input_map(g),
        state_cost=_quadratic_cost,
        control_weight=[0.01, 0.01], u_min=[-1.0, -1.0], u_max=[1.0, 1.0],
        discount=0.05, lo=[-2.0] * 3, hi=[2.0] * 3, default_n=[41] * 3,
        **kwargs)


def _test4() -> ProblemSpec:
    sigma, rho, beta = LORENZ_SIGMA, TEST4_RHO, LORENZ_BETA

    def drift(x):
        x = np.asarray(x, float)
        return np.stack([sigma * (x[..., 1] - x[..., 0]),
                         x[..., 0] * (rho - x[..., 2]) - x[..., 1],
                         x[..., 0] * x[..., 1] - beta * x[..., 2]], axis=-1)

    return ProblemSpec(
        name="test4",
        dim=3, control_dim=1,
        drift=drift,
        input_map=_const_input_map(np.array([[0.0], [1.0], [0.0]])),
        state_cost=_quadratic_cost,
        control_weight=[0.01], u_min=[-1.0], u_max=[1.0],
        discount=0.05, lo=[-2.0] * 3, hi=[2.0] * 3, default_n=[41] * 3)


_BUILTINS: dict[str, Callable[[], ProblemSpec]] = {
    "test1_det": lambda: _test1(None),
    "test1_stoch": lambda: _test1(0.005),
    "test2": _test2,
    "test3_det": lambda: _test3(None),
    "test3_stoch": lambda: _test3(0.05),
    "test4": _test4,
}

BUILTIN_NAMES = tuple(_BUILTINS)


def builtin(name: str) -> ProblemSpec:
    """One of the builtin benchmarks; see BUILTIN_NAMES."""
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ProblemError(f"unknown builtin problem {name!r}; "
                           f"choose from {', '.join(BUILTIN_NAMES)}") from None
    return factory()


def lorenz_equilibria(sigma: float, rho: float, beta: float) -> list[np.ndarray]:
    """Steady states of the Lorenz system: the origin, plus the symmetric
    pair at (+-sqrt(beta(rho-1)), +-sqrt(beta(rho-1)), rho-1) when rho > 1."""
    points = [np.zeros(3)]
    if rho > 1:
        r = np.sqrt(beta * (rho - 1))
        points.append(np.array([r, r, rho - 1]))
        points.append(np.array([-r, -r, rho - 1]))
    return points


# ---------------------------------------------------------------------------
# custom problems from JSON: polynomial coordinate expressions
# ---------------------------------------------------------------------------

_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_ALLOWED_UNARY = (ast.UAdd, ast.USub)


def _compile_expr(text: str, dim: int, params: dict[str, float],
                  where: str) -> Callable[[np.ndarray], np.ndarray]:
    """Compile a coordinate expression such as "sigma*(x2 - x1) + x1**2".

    Vocabulary: coordinates x1..xd, named parameters, numeric literals and
    the operators + - * / ** with parentheses.
    """
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ProblemError(f"{where}: cannot parse {text!r}: {exc}") from None
    names = {f"x{k + 1}" for k in range(dim)}
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.Constant)):
            if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
                raise ProblemError(f"{where}: non-numeric literal in {text!r}")
        elif isinstance(node, ast.Name):
            if node.id not in names and node.id not in params:
                raise ProblemError(f"{where}: unknown name {node.id!r} in {text!r}")
        elif isinstance(node, ast.BinOp):
            if not isinstance(node.op, _ALLOWED_BINOPS):
                raise ProblemError(f"{where}: operator not allowed in {text!r}")
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, _ALLOWED_UNARY):
                raise ProblemError(f"{where}: operator not allowed in {text!r}")
        elif isinstance(node, (ast.operator, ast.unaryop, ast.Load)):
            pass
        else:
            raise ProblemError(f"{where}: {type(node).__name__} not allowed in {text!r}")
    code = compile(tree, f"<{where}>", "eval")

    def evaluate(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        env = {f"x{k + 1}": x[..., k] for k in range(dim)}
        env.update(params)
        out = eval(code, {"__builtins__": {}}, env)  # noqa: S307 - ast-whitelisted
        return np.broadcast_to(np.asarray(out, float), x.shape[:-1])

    return evaluate


def _compile_vector(exprs, dim, params, where):
    funcs = [_compile_expr(e, dim, params, f"{where}[{i}]") for i, e in enumerate(exprs)]

    def evaluate(x):
        x = np.asarray(x, float)
        return np.stack([f(x) for f in funcs], axis=-1)

    return evaluate


def _compile_matrix(rows, dim, params, where):
    funcs = [[_compile_expr(e, dim, params, f"{where}[{i}][{j}]")
              for j, e in enumerate(row)] for i, row in enumerate(rows)]

    def evaluate(x):
        x = np.asarray(x, float)
        return np.stack([np.stack([f(x) for f in row], axis=-1) for row in funcs],
                        axis=-2)

    return evaluate


def from_config(config: dict) -> ProblemSpec:
    """Build a ProblemSpec from a JSON-style mapping.

    Required keys: name, dim, control_dim, f (list of d expressions),
    g (d rows of m expressions), ell (scalar expression), R (m diagonal
    entries), alpha, beta (m bounds), lambda, domain {lo, hi, n}.
    Optional: params (named constants), g1 (d rows of k expressions),
    additive_noise flag.
    """
    try:
        dim = int(config["dim"])
        m = int(config["control_dim"])
        params = {k: float(v) for k, v in config.get("params", {}).items()}
        f = _compile_vector(config["f"], dim, params, "f")
        g = _compile_matrix(config["g"], dim, params, "g")
        ell = _compile_expr(config["ell"], dim, params, "ell")
        domain = config["domain"]
        kwargs = {}
        if config.get("g1") is not None:
            g1_rows = config["g1"]
            kwargs = dict(noise_map=_compile_matrix(g1_rows, dim, params, "g1"),
                          noise_dim=len(g1_rows[0]),
                          additive_noise=bool(config.get("additive_noise", False)))
        spec = ProblemSpec(
            name=str(config["name"]),
            dim=dim, control_dim=m,
            drift=f, input_map=g, state_cost=ell,
            control_weight=config["R"],
            u_min=config["alpha"], u_max=config["beta"],
            discount=float(config["lambda"]),
            lo=domain["lo"], hi=domain["hi"],
            default_n=domain.get("n", [41] * dim),
            **kwargs)
    except KeyError as exc:
        raise ProblemError(f"custom problem config is missing key {exc}") from None
    return spec


def load_problem(path: str) -> ProblemSpec:
    """Load a custom problem from a JSON file."""
    with open(path) as fh:
        config = json.load(fh)
    p = from_config(config)
    p.validate()
    return p

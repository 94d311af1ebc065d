"""Grid-based synthesis of constrained optimal feedback laws.

Policy iteration on stationary first- and second-order HJB equations:
policy evaluation by an implicit drift-sign upwind scheme, policy
improvement by the exact box projection of the gradient law, plus
closed-loop simulation and reference oracles for the benchmarks.
"""

from .control import ControlError, PolicyField, policy_update, project_box
from .grid import Grid, GridError, classify, make_grid
from .oracle import (OracleError, RiccatiRef, fine_grid_reference, fit_quadratic,
                     riccati_1d)
from .pde import (AssemblyError, DivergenceError, PdeError, RelaxationError,
                  SchemeConfig, ValueField, diffusion_term, ghjb_solve,
                  implicit_step, upwind_gradient, upwind_gradient_induced,
                  zero_value)
from .policy import (IterationRecord, SolveReport, compare_constrained,
                     default_policy, grid_for, hjb_residual, policy_iteration,
                     warm_start_undiscount)
from .problem import (BUILTIN_NAMES, ProblemError, ProblemSpec, builtin,
                      eval_dynamics, from_config, load_problem, lorenz_equilibria,
                      running_cost, unconstrained)
from .simulate import (Ensemble, FeedbackLaw, SimulationError, Trajectory,
                       feedback_at, simulate_ode, simulate_sde)

__version__ = "0.1.0"

__all__ = [
    "AssemblyError", "BUILTIN_NAMES", "ControlError", "DivergenceError",
    "Ensemble", "FeedbackLaw", "Grid", "GridError", "IterationRecord",
    "OracleError", "PdeError", "PolicyField", "ProblemError", "ProblemSpec",
    "RelaxationError", "RiccatiRef", "SchemeConfig", "SolveReport",
    "SimulationError", "Trajectory", "ValueField", "builtin", "classify",
    "compare_constrained", "default_policy", "diffusion_term", "eval_dynamics",
    "feedback_at", "fine_grid_reference", "fit_quadratic", "from_config",
    "ghjb_solve", "grid_for", "hjb_residual", "implicit_step", "load_problem",
    "lorenz_equilibria", "make_grid", "policy_iteration", "policy_update",
    "project_box", "riccati_1d", "running_cost", "simulate_ode", "simulate_sde",
    "unconstrained", "upwind_gradient", "upwind_gradient_induced",
    "warm_start_undiscount", "zero_value",
]

"""Optimal control of switched-mode systems by Hamiltonian descent.

The decision variable is an embedded control: per grid node, a probability
weight over modes plus one input value per mode.  Each iteration integrates
the state and costate, builds the pointwise Hamiltonian minimizer, takes an
Armijo-sized step toward it in the space of measures, and blends the result
back into a single embedded control of fixed size.
"""

from .model import (ControlSet, HybridModel, ModeSpec, affine_quadratic_model,
                    check_model_derivatives, eval_mode_dynamics,
                    eval_mode_dynamics_jac, eval_run_cost, eval_run_cost_grad_x)
from .benchmarks import BENCHMARK_DEFAULTS, BUILTIN_MODELS, builtin_model
from .control import (ControlNode, EmbeddedControl, OrdinaryControl, blend,
                      make_grid, pwm_project, read_control_csv, sample,
                      validate, write_control_csv, write_ordinary_csv)
from .sim import (CostateTrajectory, DivergenceError, ShootingConfig,
                  Trajectory, eval_cost, eval_cost_combination, integrate_costate,
                  integrate_state, shooting_z_gradient, write_costate_csv,
                  write_trajectory_csv)
from .hamiltonian import (ConfigurationError, PointwiseMin, box_quad_min,
                          build_ustar, compute_theta, eval_hamiltonian_embedded,
                          eval_hamiltonian_mode, pointwise_min)
from .solver import (IterationRecord, SolveConfig, SolveResult, SolveStatus,
                     StepFailureError, StepResult, armijo, solve, step,
                     write_iteration_log)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

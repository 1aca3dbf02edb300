"""Built-in benchmark systems.

Three ready-made problems exercising the solver:

* ``double_tank`` -- two gravity-drained tanks whose inflow valve switches
  between two rates; the lower tank level tracks a sinusoidal reference.
  Pure switch modes (no continuous input).
* ``unstable_lqr`` -- two unstable linear modes with a scalar unconstrained
  input and a quadratic tracking/terminal cost.  Best solved with multiple
  shooting because single-shot trajectories grow like exp(3 t).
* ``mass_spring_damper`` -- a mass on a piecewise-linear spring with
  switchable damping and a bounded force input; end-state constraints are
  folded into the terminal cost as quadratic penalties.
"""

from __future__ import annotations

from math import sqrt
from typing import Mapping, Optional

import numpy as np

from .model import ControlSet, HybridModel, ModeSpec, _const_matrix, _frozen

__all__ = ["builtin_model", "BUILTIN_MODELS", "BENCHMARK_DEFAULTS"]

# Solver settings used for the published benchmark runs.
BENCHMARK_DEFAULTS = {
    "double_tank": dict(dt=0.01, integrator="euler", max_iters=100,
                        armijo_alpha=0.5, armijo_beta=0.5),
    "unstable_lqr": dict(dt=0.1 / 9.0, integrator="trapezoid", max_iters=400,
                         armijo_alpha=0.1, armijo_beta=0.5,
                         shooting_segments=10, shooting_penalty=22.5),
    "mass_spring_damper": dict(dt=0.01, integrator="euler", max_iters=50,
                               armijo_alpha=0.01, armijo_beta=0.5),
}


def _apply_overrides(defaults: dict, overrides: Optional[Mapping], name: str) -> dict:
    params = dict(defaults)
    for key, value in (overrides or {}).items():
        if key not in params:
            raise ValueError(
                f"{name} has no parameter {key!r}; valid overrides: "
                + ", ".join(sorted(params)))
        params[key] = value
    return params


def double_tank(overrides: Optional[Mapping] = None) -> HybridModel:
    """Two stacked tanks, inflow valve switchable between two rates.

    States are the fluid volumes; the outflow of each tank follows
    Toricelli's law (proportional to the square root of its volume, clamped
    at zero so transient negative volumes from coarse steps stay harmless).
    The running cost ``2 (x2 - r(t))^2`` tracks the reference
    ``r(t) = r_amplitude * sin(pi * r_frequency * t) + r_offset``.
    """
    params = _apply_overrides(
        dict(x0=(2.0, 2.0), t_f=30.0, inflow=(1.0, 2.0),
             r_amplitude=0.5, r_frequency=0.1, r_offset=2.5),
        overrides, "double_tank")
    amp = float(params["r_amplitude"])
    freq = float(params["r_frequency"])
    off = float(params["r_offset"])

    def reference(t):
        return amp * np.sin(freq * np.pi * np.asarray(t, dtype=float)) + off

    def safe_sqrt(x):
        return np.sqrt(np.maximum(np.asarray(x, dtype=float), 0.0))

    def run_cost(t, x, u):
        x = np.asarray(x, dtype=float)
        return 2.0 * (x[..., 1] - reference(t)) ** 2

    def run_cost_grad_x(t, x, u):
        x = np.asarray(x, dtype=float)
        g = np.zeros_like(x)
        g[..., 1] = 4.0 * (x[..., 1] - reference(t))
        return g

    modes = []
    for rate in params["inflow"]:
        def psi(x, rate=float(rate)):
            s = safe_sqrt(x)
            return np.stack([rate - s[..., 0], s[..., 0] - s[..., 1]], axis=-1)

        def psi_jac(x):
            x = np.asarray(x, dtype=float)
            # derivative of sqrt(max(x, 0)): zero on the clamped branch
            d = np.where(x > 0.0, 0.5 / safe_sqrt(np.maximum(x, 1e-300)), 0.0)
            jac = np.zeros(x.shape + (2,))
            jac[..., 0, 0] = -d[..., 0]
            jac[..., 1, 0] = d[..., 0]
            jac[..., 1, 1] = -d[..., 1]
            return jac

        modes.append(ModeSpec(
            control_dim=0,
            control_set=ControlSet.empty(),
            dyn_psi=psi,
            dyn_psi_jac=psi_jac,
            run_cost=run_cost,
            run_cost_grad_x=run_cost_grad_x,
        ))

    r0, r1 = (float(r) for r in params["inflow"])

    def mixture(x, weights, input_rows):
        # scalar math: this runs once per integration step
        x0, x1 = x[0], x[1]
        s0 = sqrt(x0) if x0 > 0.0 else 0.0
        s1 = sqrt(x1) if x1 > 0.0 else 0.0
        return np.array([weights[0] * r0 + weights[1] * r1 - s0, s0 - s1])

    return HybridModel(
        state_dim=2,
        modes=tuple(modes),
        terminal_cost=lambda x: 0.0,
        terminal_cost_grad=lambda x: np.zeros(2),
        x0=params["x0"],
        t_f=float(params["t_f"]),
        domain_warning=lambda x: np.any(np.asarray(x) < 0.0, axis=-1),
        mixture_dynamics=mixture,
        name="double_tank",
    )


def unstable_lqr(overrides: Optional[Mapping] = None) -> HybridModel:
    """Two unstable LTI modes with scalar input and quadratic costs."""
    params = _apply_overrides(dict(x0=(0.0, 2.0), t_f=2.0), overrides,
                              "unstable_lqr")
    A = (_frozen([[0.6, 1.2], [-0.8, 3.4]]),
         _frozen([[4.0, 3.0], [-1.0, 0.0]]))
    b = (_frozen([[1.0], [1.0]]), _frozen([[2.0], [-1.0]]))

    def run_cost(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return 0.5 * (x[..., 1] - 2.0) ** 2 + 0.5 * u[..., 0] ** 2

    def run_cost_grad_x(t, x, u):
        x = np.asarray(x, dtype=float)
        g = np.zeros_like(x)
        g[..., 1] = x[..., 1] - 2.0
        return g

    modes = []
    for Ai, bi in zip(A, b):
        def psi(x, Ai=Ai):
            return np.asarray(x, dtype=float) @ Ai.T

        modes.append(ModeSpec(
            control_dim=1,
            control_set=ControlSet.unbounded(1),
            dyn_psi=psi,
            dyn_psi_jac=_const_matrix(Ai),
            dyn_phi=_const_matrix(bi),
            dyn_phi_jac=_const_matrix(np.zeros((2, 1, 2))),
            run_cost=run_cost,
            run_cost_grad_x=run_cost_grad_x,
            quad_r_diag=np.array([0.5]),
        ))

    def terminal_cost(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * (x[..., 0] - 4.0) ** 2 + 0.5 * (x[..., 1] - 2.0) ** 2

    def terminal_cost_grad(x):
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 0] - 4.0, x[..., 1] - 2.0], axis=-1)

    b_stack = np.stack([bi[:, 0] for bi in b])

    def mixture(x, weights, input_rows, A0=A[0], A1=A[1]):
        out = (weights[0] * A0 + weights[1] * A1) @ x
        for i in range(2):
            if weights[i] != 0.0:
                out = out + (weights[i] * input_rows[i][0]) * b_stack[i]
        return out

    return HybridModel(
        state_dim=2,
        modes=tuple(modes),
        terminal_cost=terminal_cost,
        terminal_cost_grad=terminal_cost_grad,
        x0=params["x0"],
        t_f=float(params["t_f"]),
        mixture_dynamics=mixture,
        name="unstable_lqr",
    )


def mass_spring_damper(overrides: Optional[Mapping] = None) -> HybridModel:
    """Forced mass with a piecewise-linear spring and switchable damping.

    The spring force is ``x1 + 1`` up to ``x1 = 1`` and ``3 x1 + 7.5``
    beyond; the Jacobian uses the left branch exactly at the break point.
    Mode damping coefficients are 1 and 50, mode 1 paying a unit rate for
    the strong damper.  The end-state requirement |x(t_f)| <= 0.01 is
    approximated by the quadratic penalty ``5 x1^2 + 30 x2^2`` added to the
    terminal cost; ``terminal_penalty`` exposes it so reports can quote the
    cost without it.
    """
    params = _apply_overrides(
        dict(x0=(3.0, 4.0), t_f=12.0, mass=1.0, u_max=10.0, damping=(1.0, 50.0)),
        overrides, "mass_spring_damper")
    mass = float(params["mass"])
    u_max = float(params["u_max"])

    def spring(x1):
        return np.where(x1 <= 1.0, x1 + 1.0, 3.0 * x1 + 7.5)

    def spring_slope(x1):
        return np.where(x1 <= 1.0, 1.0, 3.0)

    phi = _frozen([[0.0], [1.0 / mass]])

    modes = []
    for idx, damping in enumerate(params["damping"]):
        bcoef = float(damping)
        # running cost: ||x||^2 + 0.2 u^2, plus a unit rate for mode 1
        offset = float(idx)

        def run_cost(t, x, u, offset=offset):
            x = np.asarray(x, dtype=float)
            u = np.asarray(u, dtype=float)
            return (x[..., 0] ** 2 + x[..., 1] ** 2
                    + 0.2 * u[..., 0] ** 2 + offset)

        def run_cost_grad_x(t, x, u):
            return 2.0 * np.asarray(x, dtype=float)

        def psi(x, bcoef=bcoef):
            x = np.asarray(x, dtype=float)
            acc = (-spring(x[..., 0]) - bcoef * x[..., 1]) / mass
            return np.stack([x[..., 1], acc], axis=-1)

        def psi_jac(x, bcoef=bcoef):
            x = np.asarray(x, dtype=float)
            jac = np.zeros(x.shape + (2,))
            jac[..., 0, 1] = 1.0
            jac[..., 1, 0] = -spring_slope(x[..., 0]) / mass
            jac[..., 1, 1] = -bcoef / mass
            return jac

        modes.append(ModeSpec(
            control_dim=1,
            control_set=ControlSet.box([-u_max], [u_max]),
            dyn_psi=psi,
            dyn_psi_jac=psi_jac,
            dyn_phi=_const_matrix(phi),
            dyn_phi_jac=_const_matrix(np.zeros((2, 1, 2))),
            run_cost=run_cost,
            run_cost_grad_x=run_cost_grad_x,
            quad_r_diag=np.array([0.2]),
        ))

    def terminal_penalty(x):
        x = np.asarray(x, dtype=float)
        return 5.0 * x[..., 0] ** 2 + 30.0 * x[..., 1] ** 2

    def terminal_cost(x):
        x = np.asarray(x, dtype=float)
        return x[..., 0] ** 2 + x[..., 1] ** 2 + terminal_penalty(x)

    def terminal_cost_grad(x):
        x = np.asarray(x, dtype=float)
        return np.stack([12.0 * x[..., 0], 62.0 * x[..., 1]], axis=-1)

    b0, b1 = (float(bv) for bv in params["damping"])

    def mixture(x, weights, input_rows):
        x0, x1 = x[0], x[1]
        force = x0 + 1.0 if x0 <= 1.0 else 3.0 * x0 + 7.5
        u_mix = weights[0] * input_rows[0][0] + weights[1] * input_rows[1][0]
        acc = (-force - (weights[0] * b0 + weights[1] * b1) * x1 + u_mix) / mass
        return np.array([x1, acc])

    return HybridModel(
        state_dim=2,
        modes=tuple(modes),
        terminal_cost=terminal_cost,
        terminal_cost_grad=terminal_cost_grad,
        x0=params["x0"],
        t_f=float(params["t_f"]),
        terminal_penalty=terminal_penalty,
        mixture_dynamics=mixture,
        name="mass_spring_damper",
    )


BUILTIN_MODELS = {
    "double_tank": double_tank,
    "unstable_lqr": unstable_lqr,
    "mass_spring_damper": mass_spring_damper,
}


def builtin_model(name: str, overrides: Optional[Mapping] = None) -> HybridModel:
    """Instantiate a built-in benchmark by name, with parameter overrides."""
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        raise KeyError(
            f"unknown model {name!r}; available: "
            + ", ".join(sorted(BUILTIN_MODELS))) from None
    return factory(overrides)

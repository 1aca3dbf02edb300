"""Hamiltonian evaluation, pointwise minimization and the optimality gap.

The mode Hamiltonian is ``H_i(x, u, p) = p' f_i(x, u) + L_i(t, x, u)``.
Because the dynamics are affine and the costs convex in the input, the
minimizer of ``H_i`` over an axis-aligned box has the closed form of a
clamped stationary point whenever the input cost is a positive diagonal
quadratic; minimizing over modes is then a finite comparison.

``compute_theta`` integrates the gap between the pointwise-minimal
Hamiltonian and the current control's Hamiltonian.  It is nonpositive by
construction, zero exactly when the control already satisfies the minimum
principle on the grid, and its magnitude drives both the stopping rule and
the Armijo acceptance test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control import ControlNode, EmbeddedControl, OrdinaryControl, same_grid
from .model import HybridModel
from .sim import CostateTrajectory, Trajectory, _quadrature

__all__ = [
    "ConfigurationError",
    "PointwiseMin",
    "eval_hamiltonian_mode",
    "eval_hamiltonian_embedded",
    "box_quad_min",
    "pointwise_min",
    "build_ustar",
    "compute_theta",
]


class ConfigurationError(RuntimeError):
    """A mode lacks a usable pointwise Hamiltonian minimizer."""


@dataclass(frozen=True, eq=False)
class PointwiseMin:
    """Minimizing mode, input and Hamiltonian value at one ``(x, p)``."""

    mode: int
    input: np.ndarray
    value: float


def eval_hamiltonian_mode(model: HybridModel, i: int, x, u, p, t=0.0):
    """``p' f_i(x, u) + L_i(t, x, u)`` (batched over a leading axis)."""
    from .model import eval_mode_dynamics, eval_run_cost

    f = eval_mode_dynamics(model, i, x, u)
    p = np.asarray(p, dtype=float)
    return np.einsum("...n,...n->...", p, f) + eval_run_cost(model, i, x, u, t)


def eval_hamiltonian_embedded(model: HybridModel, node: ControlNode, x, p, t=0.0):
    """Weight-averaged Hamiltonian of an embedded control node."""
    if node.n_modes != model.n_modes:
        raise ValueError("node mode count does not match the model")
    total = 0.0
    for i in range(model.n_modes):
        a = node.weights[i]
        if a == 0.0:
            continue
        total += a * eval_hamiltonian_mode(model, i, x, node.inputs[i], p, t)
    return total


def _clamped_quad_min(mode, s: np.ndarray) -> np.ndarray:
    """Minimize ``s . u + u' diag(r) u`` over the mode's box.

    ``s`` is the Hamiltonian's linear coefficient ``dyn_phi(x)' p``;
    separability makes the minimizer a componentwise clamp.  Coordinates
    with a zero quadratic weight fall back to the linear rule (bound
    against the slope sign, 0 clamped into the box on ties).
    """
    r = mode.quad_r_diag
    lo, hi = mode.control_set.lower, mode.control_set.upper
    with np.errstate(divide="ignore", invalid="ignore"):
        stationary = -s / (2.0 * np.where(r > 0.0, r, 1.0))
    if np.all(r > 0.0):
        return np.clip(stationary, lo, hi)
    zero = np.clip(np.zeros_like(s), lo, hi)
    linear = np.where(s > 0.0, lo, np.where(s < 0.0, hi, zero))
    return np.where(r > 0.0, np.clip(stationary, lo, hi), linear)


def box_quad_min(model: HybridModel, i: int, x, p) -> np.ndarray:
    """Closed-form Hamiltonian minimizer for a diagonal-quadratic input cost."""
    mode = model.mode(i)
    if mode.control_dim == 0:
        return np.zeros(np.asarray(x).shape[:-1] + (0,))
    if mode.quad_r_diag is None:
        raise ConfigurationError(
            f"mode {i} has no diagonal quadratic input cost; "
            "supply a pointwise_min callable instead")
    phi = np.asarray(mode.dyn_phi(np.asarray(x, dtype=float)), dtype=float)
    s = np.einsum("...nk,...n->...k", phi, np.asarray(p, dtype=float))
    return _clamped_quad_min(mode, s)


def _mode_minimizer(model: HybridModel, i: int, t, x, p) -> np.ndarray:
    """Route to the mode's minimizer (custom callable or closed form)."""
    mode = model.mode(i)
    if mode.control_dim == 0:
        return np.zeros(np.asarray(x).shape[:-1] + (0,))
    if mode.pointwise_min is not None:
        u = np.asarray(mode.pointwise_min(t, x, p), dtype=float)
        return mode.control_set.clamp(u)
    if mode.quad_r_diag is not None:
        return box_quad_min(model, i, x, p)
    raise ConfigurationError(
        f"mode {i} has neither a pointwise_min callable nor a diagonal "
        "quadratic input cost; no Hamiltonian minimizer is available")


def pointwise_min(model: HybridModel, x, p, t=0.0) -> PointwiseMin:
    """Minimize the Hamiltonian over modes and inputs at one ``(x, p)``.

    Ties between modes break toward the lowest index.
    """
    best = None
    for i in range(model.n_modes):
        u = _mode_minimizer(model, i, t, x, p)
        val = float(eval_hamiltonian_mode(model, i, x, u, p, t))
        if best is None or val < best.value:
            best = PointwiseMin(mode=i, input=u, value=val)
    return best


def build_ustar(model: HybridModel, traj: Trajectory,
                costate: CostateTrajectory) -> OrdinaryControl:
    """Pointwise Hamiltonian minimizer along a trajectory, held per node.

    Every mode's candidate input is kept at every node (so the result can
    be blended without masking); the active mode is the per-node argmin,
    lowest index on ties.
    """
    if not same_grid(traj.times, costate.times):
        raise ValueError("trajectory and costate grids do not match")
    times, states, ps = traj.times, traj.states, costate.costates
    values = np.empty((model.n_modes, times.size))
    inputs = []
    for i in range(model.n_modes):
        u = _mode_minimizer(model, i, times, states, ps)
        inputs.append(u)
        values[i] = eval_hamiltonian_mode(model, i, states, u, ps, times)
    active = np.argmin(values, axis=0)
    return OrdinaryControl(times, active, tuple(inputs))


def compute_theta(model: HybridModel, w: EmbeddedControl, traj: Trajectory,
                  costate: CostateTrajectory, u_star: OrdinaryControl) -> float:
    """Integrated Hamiltonian gap between ``u_star`` and ``w``.

    Uses the same quadrature as the cost so the Armijo test and the descent
    certificate are consistent.  Nonpositive whenever ``u_star`` minimizes
    the Hamiltonian at every node.
    """
    if not (same_grid(w.times, traj.times) and same_grid(w.times, costate.times)
            and same_grid(w.times, u_star.times)):
        raise ValueError("grids do not match")
    times, states, ps = traj.times, traj.states, costate.costates

    h_star = np.zeros(times.size)
    for i in range(model.n_modes):
        mask = u_star.mode == i
        if not mask.any():
            continue
        h_star[mask] = eval_hamiltonian_mode(
            model, i, states[mask], u_star.inputs[i][mask], ps[mask], times[mask])

    h_w = np.zeros(times.size)
    for i in range(model.n_modes):
        col = w.weights[:, i]
        if not col.any():
            continue
        h_w += col * eval_hamiltonian_mode(model, i, states, w.inputs[i], ps, times)

    gap = h_star - h_w
    return _quadrature(gap, w.dt, traj.method, [(0, times.size - 1)])

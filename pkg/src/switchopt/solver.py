"""Main descent loop: costate solve, Armijo step sizing, blend, stopping.

One iteration from the current control ``w``:

1. integrate the state forward and the costate backward;
2. build the pointwise Hamiltonian minimizer ``u*`` along the trajectory
   and the optimality gap ``theta`` (converged when ``theta >= -tol``);
3. find the largest ``lam`` in ``{1, beta, beta^2, ...}`` whose measure
   combination ``(1 - lam) w (+) lam u*`` improves the cost by at least
   ``alpha * lam * theta``;
4. blend the accepted combination back into a single embedded control,
   which keeps the trajectory and can only reduce the cost further.

With multiple shooting active, each control step is followed by one
backtracking gradient step on the segment restart states, so the
penalty-augmented cost decreases monotonically through both blocks.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .control import EmbeddedControl, OrdinaryControl, blend
from .hamiltonian import build_ustar, compute_theta
from .model import HybridModel
from .sim import (DivergenceError, ShootingConfig, Trajectory, eval_cost,
                  eval_cost_combination, integrate_costate, integrate_state,
                  shooting_z_gradient)

__all__ = [
    "SolveConfig",
    "IterationRecord",
    "SolveStatus",
    "SolveResult",
    "StepResult",
    "StepFailureError",
    "armijo",
    "step",
    "solve",
    "write_iteration_log",
]

_Z_ARMIJO_ALPHA = 0.1


class SolveStatus(enum.Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    STEP_FAILURE = "step_failure"


class StepFailureError(RuntimeError):
    """No Armijo step satisfied the acceptance test within the backtrack cap.

    Distinct from convergence: the optimality gap was still below the
    tolerance, but the discretized cost refused to follow it.
    """

    def __init__(self, theta: float, last_lambda: float, last_gap: float,
                 backtracks: int):
        super().__init__(
            f"no step accepted after {backtracks} backtracks "
            f"(theta={theta:.3e}, last lambda={last_lambda:.3e}, "
            f"last cost gap={last_gap:.3e})")
        self.theta = theta
        self.last_lambda = last_lambda
        self.last_gap = last_gap
        self.backtracks = backtracks


@dataclass(frozen=True)
class SolveConfig:
    """Algorithm constants.

    ``armijo_alpha``/``armijo_beta`` are the acceptance fraction and the
    backtracking ratio, both in (0, 1).  ``dt`` must divide the model
    horizon and match the initial control's grid.  When
    ``shooting_segments`` is set, the horizon is split into that many
    equal multiple-shooting segments with defect penalty
    ``shooting_penalty`` (default ``2.5 * (segments - 1)``).
    ``armijo_on_blend`` evaluates the acceptance test on the blended
    control instead of the measure combination; since the blend costs no
    more, acceptance and descent are preserved.
    """

    dt: float
    integrator: str = "euler"
    max_iters: int = 100
    armijo_alpha: float = 0.1
    armijo_beta: float = 0.5
    max_backtracks: int = 40
    theta_tol: float = 1e-6
    shooting_segments: Optional[int] = None
    shooting_penalty: Optional[float] = None
    armijo_on_blend: bool = False

    def __post_init__(self):
        if not 0.0 < self.armijo_alpha < 1.0:
            raise ValueError("armijo_alpha must lie in (0, 1)")
        if not 0.0 < self.armijo_beta < 1.0:
            raise ValueError("armijo_beta must lie in (0, 1)")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.theta_tol <= 0.0:
            raise ValueError("theta_tol must be positive")
        if self.max_backtracks < 0:
            raise ValueError("max_backtracks must be >= 0")
        if self.shooting_segments is not None and self.shooting_segments < 1:
            raise ValueError("shooting_segments must be >= 1")


@dataclass(frozen=True)
class IterationRecord:
    """Bookkeeping for one accepted iteration.

    ``cost`` is the iterate's cost after the full iteration (including the
    restart-state update when shooting); ``theta`` is the optimality gap of
    the iterate the step was taken from, so ``combo_cost - prev_cost <
    alpha * lam * theta`` replays the acceptance test exactly.
    """

    iter: int
    cost: float
    theta: float
    lam: float
    backtracks: int
    wall_ms: float
    prev_cost: float
    combo_cost: float
    blend_cost: float
    z_step: float = 0.0
    defect: float = 0.0


@dataclass(frozen=True)
class StepResult:
    converged: bool
    theta: float
    control: Optional[EmbeddedControl] = None
    record: Optional[IterationRecord] = None
    traj: Optional[Trajectory] = None
    cost: Optional[float] = None
    u_star: Optional[OrdinaryControl] = None


@dataclass(frozen=True)
class SolveResult:
    control: EmbeddedControl
    history: List[IterationRecord]
    status: SolveStatus
    cost: float
    initial_cost: float
    final_theta: float
    shooting: Optional[ShootingConfig] = None
    failure: Optional[StepFailureError] = None

    @property
    def iterations(self) -> int:
        return len(self.history)


def armijo(model: HybridModel, w: EmbeddedControl, u_star: OrdinaryControl,
           theta: float, config: SolveConfig, cost_w: float,
           shooting: Optional[ShootingConfig] = None):
    """Largest ``lam`` in ``{1, beta, ...}`` passing the sufficient-decrease test.

    Returns ``(lam, blended_control, trajectory, combo_cost, backtracks)``,
    or ``None`` when ``theta`` is already within tolerance (no integration
    performed).  Candidates whose trajectories diverge count as rejected.
    Raises :class:`StepFailureError` after ``max_backtracks`` rejections.
    """
    if theta >= -config.theta_tol:
        return None
    threshold = config.armijo_alpha * theta
    lam = 1.0
    last_gap = np.inf
    for backtracks in range(config.max_backtracks + 1):
        y = blend(w, u_star, lam)
        try:
            traj = integrate_state(model, y, method=config.integrator,
                                   shooting=shooting)
        except DivergenceError:
            traj = None
        if traj is None:
            candidate = np.inf
        elif config.armijo_on_blend:
            candidate = eval_cost(model, y, traj, shooting)
        else:
            candidate = eval_cost_combination(model, w, u_star, lam, traj,
                                              shooting)
        last_gap = candidate - cost_w
        if last_gap < lam * threshold:
            return lam, y, traj, candidate, backtracks
        lam *= config.armijo_beta
    raise StepFailureError(theta, lam / config.armijo_beta, float(last_gap),
                           config.max_backtracks)


def step(model: HybridModel, w: EmbeddedControl, config: SolveConfig,
         shooting: Optional[ShootingConfig] = None,
         traj: Optional[Trajectory] = None,
         cost: Optional[float] = None) -> StepResult:
    """One full iteration from ``w``; pass ``traj``/``cost`` to reuse them."""
    t0 = time.perf_counter()
    if traj is None:
        traj = integrate_state(model, w, method=config.integrator,
                               shooting=shooting)
    if cost is None:
        cost = eval_cost(model, w, traj, shooting)
    costate = integrate_costate(model, w, traj, shooting)
    u_star = build_ustar(model, traj, costate)
    theta = compute_theta(model, w, traj, costate, u_star)
    found = armijo(model, w, u_star, theta, config, cost, shooting)
    if found is None:
        return StepResult(converged=True, theta=theta, control=w, traj=traj,
                          cost=cost)
    lam, y, traj_y, combo_cost, backtracks = found
    blend_cost = eval_cost(model, y, traj_y, shooting)
    record = IterationRecord(
        iter=0, cost=blend_cost, theta=theta, lam=lam, backtracks=backtracks,
        wall_ms=(time.perf_counter() - t0) * 1e3, prev_cost=cost,
        combo_cost=combo_cost, blend_cost=blend_cost)
    return StepResult(converged=False, theta=theta, control=y, record=record,
                      traj=traj_y, cost=blend_cost, u_star=u_star)


def _z_update(model, w, config, shooting, traj, cost, step_init):
    """One backtracking gradient step on the segment restart states.

    Accepts the first step with decrease at least ``0.1 * s * ||g||^2``;
    keeps ``z`` unchanged if every candidate fails.  Returns the updated
    shooting config, trajectory, cost, accepted step and a warm-start value
    for the next call.
    """
    costate = integrate_costate(model, w, traj, shooting)
    g = shooting_z_gradient(model, w, traj, costate, shooting)
    gnorm2 = float(np.sum(g * g))
    if gnorm2 <= 1e-18:
        return shooting, traj, cost, 0.0, step_init
    s = step_init
    for _ in range(config.max_backtracks + 1):
        candidate = dataclasses.replace(shooting, z=shooting.z - s * g)
        try:
            traj_c = integrate_state(model, w, method=config.integrator,
                                     shooting=candidate)
            cost_c = eval_cost(model, w, traj_c, candidate)
        except DivergenceError:
            cost_c = np.inf
        if cost_c - cost < -_Z_ARMIJO_ALPHA * s * gnorm2:
            return candidate, traj_c, cost_c, s, min(s / config.armijo_beta, 1.0)
        s *= config.armijo_beta
    return shooting, traj, cost, 0.0, max(step_init * config.armijo_beta, 1e-12)


def solve(model: HybridModel, w0: EmbeddedControl, config: SolveConfig,
          shooting: Optional[ShootingConfig] = None) -> SolveResult:
    """Iterate :func:`step` until the gap tolerance, the cap, or a failure.

    With ``config.shooting_segments`` set (and no explicit ``shooting``
    given), every restart state starts at the model's initial state and
    every control step is followed by one restart-state update.  (Seeding
    ``z`` on the single-shot trajectory instead keeps the initial penalty
    at zero, but for unstable systems it anchors the segments to an
    exponentially grown trajectory that the updates then have to claw
    back; pass ``shooting=ShootingConfig.from_forward_sim(...)`` to opt
    in.)
    """
    if abs(w0.dt - config.dt) > 1e-9 * max(1.0, config.dt):
        raise ValueError(f"initial control grid step {w0.dt} does not match "
                         f"config.dt {config.dt}")
    if shooting is None and config.shooting_segments is not None \
            and config.shooting_segments > 1:
        penalty = config.shooting_penalty
        if penalty is None:
            penalty = ShootingConfig.default_penalty(config.shooting_segments)
        shooting = ShootingConfig(
            segments=config.shooting_segments, penalty_k=penalty,
            z=np.tile(model.x0, (config.shooting_segments - 1, 1)))

    w = w0
    traj = integrate_state(model, w, method=config.integrator, shooting=shooting)
    cost = eval_cost(model, w, traj, shooting)
    initial_cost = cost
    history: List[IterationRecord] = []
    status = SolveStatus.MAX_ITERS
    failure = None
    final_theta = np.nan
    z_step = 1.0 / max(2.0 * shooting.penalty_k, 1.0) if shooting else 0.0

    for k in range(1, config.max_iters + 1):
        t0 = time.perf_counter()
        try:
            out = step(model, w, config, shooting, traj, cost)
        except StepFailureError as err:
            status = SolveStatus.STEP_FAILURE
            failure = err
            final_theta = err.theta
            break
        final_theta = out.theta
        if out.converged:
            status = SolveStatus.CONVERGED
            break
        w, traj, cost = out.control, out.traj, out.cost
        record = out.record
        accepted_z, defect = 0.0, 0.0
        if shooting is not None and shooting.segments > 1:
            shooting, traj, cost, accepted_z, z_step = _z_update(
                model, w, config, shooting, traj, cost, z_step)
            defect = float(np.max(np.linalg.norm(
                traj.seg_ends - shooting.z, axis=1)))
        history.append(dataclasses.replace(
            record, iter=k, cost=cost, z_step=accepted_z, defect=defect,
            wall_ms=(time.perf_counter() - t0) * 1e3))

    return SolveResult(control=w, history=history, status=status, cost=cost,
                       initial_cost=initial_cost, final_theta=float(final_theta),
                       shooting=shooting, failure=failure)


def write_iteration_log(records, path) -> None:
    """CSV log: iter, J, theta, lambda, backtracks, wall_ms."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["iter", "J", "theta", "lambda", "backtracks", "wall_ms"])
        for r in records:
            out.writerow([r.iter, format(r.cost, ".17g"),
                          format(r.theta, ".17g"), format(r.lam, ".17g"),
                          r.backtracks, format(r.wall_ms, ".3f")])

"""Embedded controls on a uniform grid, the blend step and PWM projection.

An embedded control assigns every grid node a weight vector on the
probability simplex over modes plus one input value per mode, held constant
over each step (zero-order hold).  An ordinary control is the one-hot
special case: a single active mode per node.

The central operation is :func:`blend`: it folds the convex combination (in
the sense of measures) of an embedded control and a one-hot control back
into a single embedded control with the same trajectory and no larger cost,
so the iterate stays one weight vector + one input per mode regardless of
how many iterations have been taken.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import HybridModel, _frozen

__all__ = [
    "ControlNode",
    "EmbeddedControl",
    "OrdinaryControl",
    "make_grid",
    "sample",
    "blend",
    "pwm_project",
    "validate",
    "ValidationReport",
    "write_control_csv",
    "read_control_csv",
    "write_ordinary_csv",
]

_GRID_TOL = 1e-9


def make_grid(t_f: float, dt: float) -> np.ndarray:
    """Uniform grid 0 = t_0 < ... < t_N = t_f; ``dt`` must divide ``t_f``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_steps = int(round(t_f / dt))
    if n_steps < 1 or abs(n_steps * dt - t_f) > _GRID_TOL * max(1.0, t_f):
        raise ValueError(f"dt={dt} does not divide the horizon t_f={t_f}")
    return _frozen(np.linspace(0.0, t_f, n_steps + 1))


def same_grid(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and float(np.max(np.abs(a - b), initial=0.0)) <= _GRID_TOL


@dataclass(frozen=True, eq=False)
class ControlNode:
    """Weights and per-mode inputs at a single time instant."""

    weights: np.ndarray
    inputs: tuple

    @property
    def n_modes(self) -> int:
        return self.weights.size


@dataclass(frozen=True, eq=False)
class EmbeddedControl:
    """Simplex mode weights and per-mode inputs on a uniform time grid.

    ``weights`` has shape ``(N+1, M)``; ``inputs[i]`` has shape
    ``(N+1, k_i)``.  Values are immutable after construction; operations
    return new controls.
    """

    times: np.ndarray
    weights: np.ndarray
    inputs: tuple

    def __post_init__(self):
        times = _frozen(self.times)
        weights = _frozen(self.weights)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("grid needs at least two nodes")
        if weights.shape != (times.size, weights.shape[1]) or weights.shape[1] < 1:
            raise ValueError("weights must be (n_nodes, n_modes)")
        inputs = tuple(_frozen(u) for u in self.inputs)
        if len(inputs) != weights.shape[1]:
            raise ValueError("one input array per mode required")
        for u in inputs:
            if u.shape[0] != times.size:
                raise ValueError("input arrays must span the grid")
        steps = np.diff(times)
        if np.max(np.abs(steps - steps[0])) > _GRID_TOL:
            raise ValueError("grid must be uniform")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "inputs", inputs)

    @property
    def n_nodes(self) -> int:
        return self.times.size

    @property
    def n_modes(self) -> int:
        return self.weights.shape[1]

    @property
    def t_f(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return float(self.times[-1] - self.times[0]) / (self.times.size - 1)

    def node(self, j: int) -> ControlNode:
        return ControlNode(self.weights[j], tuple(u[j] for u in self.inputs))

    # -- constructors -------------------------------------------------------

    @classmethod
    def uniform(cls, model: HybridModel, dt: float) -> "EmbeddedControl":
        """Equal weight on every mode, inputs at the box projection of 0."""
        times = make_grid(model.t_f, dt)
        n = times.size
        weights = np.full((n, model.n_modes), 1.0 / model.n_modes)
        inputs = tuple(
            np.tile(m.control_set.clamp(np.zeros(m.control_dim)), (n, 1))
            for m in model.modes)
        return cls(times, weights, inputs)

    @classmethod
    def one_hot(cls, model: HybridModel, dt: float, mode: int,
                mode_inputs: Optional[Sequence] = None) -> "EmbeddedControl":
        """All weight on one mode; constant inputs (default: clamped 0)."""
        if not 0 <= mode < model.n_modes:
            raise ValueError(f"mode index {mode} out of range")
        times = make_grid(model.t_f, dt)
        n = times.size
        weights = np.zeros((n, model.n_modes))
        weights[:, mode] = 1.0
        inputs = []
        for i, m in enumerate(model.modes):
            u = np.zeros(m.control_dim) if mode_inputs is None \
                else np.atleast_1d(np.asarray(mode_inputs[i], dtype=float))
            if u.shape != (m.control_dim,):
                raise ValueError(f"mode {i} expects {m.control_dim} input values")
            inputs.append(np.tile(m.control_set.clamp(u), (n, 1)))
        return cls(times, weights, tuple(inputs))


@dataclass(frozen=True, eq=False)
class OrdinaryControl:
    """One active mode per grid node.

    ``inputs[i]`` carries the input mode ``i`` would apply at every node, so
    conversion to an embedded control and the blend step need no masking;
    only the active mode's row affects dynamics or cost.
    """

    times: np.ndarray
    mode: np.ndarray
    inputs: tuple

    def __post_init__(self):
        times = _frozen(self.times)
        mode = _frozen(self.mode, dtype=int)
        if mode.shape != times.shape:
            raise ValueError("mode indices must span the grid")
        inputs = tuple(_frozen(u) for u in self.inputs)
        if np.any(mode < 0) or np.any(mode >= len(inputs)):
            raise ValueError("active mode index out of range")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "inputs", inputs)

    @property
    def n_modes(self) -> int:
        return len(self.inputs)

    def to_embedded(self) -> EmbeddedControl:
        weights = np.zeros((self.times.size, self.n_modes))
        weights[np.arange(self.times.size), self.mode] = 1.0
        return EmbeddedControl(self.times, weights, self.inputs)


def sample(w: EmbeddedControl, t: float) -> ControlNode:
    """Node whose hold interval contains ``t`` (the last node at ``t_f``)."""
    if t < -_GRID_TOL or t > w.t_f + _GRID_TOL:
        raise ValueError(f"t={t} outside the horizon [0, {w.t_f}]")
    j = int(np.floor(t / w.dt + 1e-9))
    return w.node(min(max(j, 0), w.n_nodes - 1))


def blend(w: EmbeddedControl, u_star: OrdinaryControl, lam: float) -> EmbeddedControl:
    """Collapse ``(1 - lam) w (+) lam u_star`` into one embedded control.

    Per node and mode: new weight ``g_i = (1-lam) a_i + lam a*_i`` and new
    input ``(1 - e_i) u_i + e_i u*_i`` with ``e_i = lam a*_i / g_i`` (taken
    as 0 where ``g_i = 0``: a massless mode's input is irrelevant, so the
    old one is kept).  The result has the same trajectory as the measure
    combination and, by convexity of the running costs in the input, no
    larger cost.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    if not same_grid(w.times, u_star.times) or w.n_modes != u_star.n_modes:
        raise ValueError("control grids do not match")
    if lam == 0.0:
        return w

    hot = np.zeros_like(w.weights)
    hot[np.arange(w.n_nodes), u_star.mode] = 1.0
    gamma = (1.0 - lam) * w.weights + lam * hot
    gamma = gamma / gamma.sum(axis=1, keepdims=True)
    eps = np.where(gamma > 0.0, lam * hot / np.where(gamma > 0.0, gamma, 1.0), 0.0)

    inputs = []
    for i in range(w.n_modes):
        e = eps[:, i:i + 1]
        mixed = (1.0 - e) * w.inputs[i] + e * u_star.inputs[i]
        inputs.append(mixed)
    return EmbeddedControl(w.times, gamma, tuple(inputs))


def pwm_project(w: EmbeddedControl, cycle: float) -> OrdinaryControl:
    """Duty-cycle projection onto single-mode switching.

    The horizon is tiled with windows of ``round(cycle / dt)`` grid steps
    (the last window keeps whatever remains).  Within each window the modes
    occupy consecutive runs in ascending index order, sized by largest-
    remainder rounding of ``window_steps * mean(weight_i)``, so every duty
    matches the averaged weight to within one grid step.  Inputs are copied
    from ``w`` node by node.
    """
    dt = w.dt
    if cycle < dt * (1.0 - 1e-9):
        raise ValueError(f"cycle {cycle} is shorter than the grid step {dt}")
    win = max(int(round(cycle / dt)), 1)
    n_steps = w.n_nodes - 1
    mode = np.empty(w.n_nodes, dtype=int)
    start = 0
    while start < n_steps:
        stop = min(start + win, n_steps)
        seats = stop - start
        quota = w.weights[start:stop].mean(axis=0) * seats
        counts = np.floor(quota).astype(int)
        frac = quota - counts
        order = np.lexsort((np.arange(w.n_modes), -frac))
        for i in order[: seats - counts.sum()]:
            counts[i] += 1
        pos = start
        for i, c in enumerate(counts):
            mode[pos:pos + c] = i
            pos += c
        start = stop
    mode[n_steps] = mode[n_steps - 1]
    return OrdinaryControl(w.times, mode, w.inputs)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    worst: float
    kind: str = ""
    node: int = -1
    mode: int = -1

    def __str__(self):
        if self.ok:
            return "ok"
        return (f"worst violation {self.worst:.3g} ({self.kind} at node "
                f"{self.node}, mode {self.mode})")


def validate(w: EmbeddedControl, model: HybridModel,
             tol: float = 1e-9) -> ValidationReport:
    """Check simplex and box invariants; reports, never raises."""
    worst, kind, node, mode = 0.0, "", -1, -1

    gaps = np.abs(w.weights.sum(axis=1) - 1.0)
    j = int(np.argmax(gaps))
    if gaps[j] > worst:
        worst, kind, node, mode = float(gaps[j]), "weight sum", j, -1

    neg = np.maximum(-w.weights, 0.0)
    j, i = np.unravel_index(int(np.argmax(neg)), neg.shape)
    if neg[j, i] > worst:
        worst, kind, node, mode = float(neg[j, i]), "negative weight", int(j), int(i)

    for i, m in enumerate(model.modes):
        if m.control_dim == 0:
            continue
        u = w.inputs[i]
        over = np.maximum(np.maximum(u - m.control_set.upper,
                                     m.control_set.lower - u), 0.0)
        j = int(np.argmax(over.max(axis=1)))
        if over[j].max() > worst:
            worst, kind, node, mode = float(over[j].max()), "input bounds", j, i

    return ValidationReport(ok=worst <= tol, worst=worst, kind=kind,
                            node=node, mode=mode)


# ---------------------------------------------------------------------------
# CSV serialization (17 significant digits: bit-exact float64 round trip)
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_control_csv(w: EmbeddedControl, path) -> None:
    """One row per node: t, alpha_1..alpha_M, u1_1.., u2_1.., ..."""
    header = ["t"] + [f"alpha_{i + 1}" for i in range(w.n_modes)]
    for i, u in enumerate(w.inputs):
        header += [f"u{i + 1}_{c + 1}" for c in range(u.shape[1])]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for j in range(w.n_nodes):
            row = [_fmt(w.times[j])] + [_fmt(v) for v in w.weights[j]]
            for u in w.inputs:
                row += [_fmt(v) for v in u[j]]
            out.writerow(row)


def read_control_csv(path) -> EmbeddedControl:
    """Load a control written by :func:`write_control_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty control file")
    header = rows[0]
    n_modes = sum(1 for h in header if h.startswith("alpha_"))
    if header[0] != "t" or n_modes == 0:
        raise ValueError(f"{path}: not a control CSV (header {header[:3]}...)")
    dims = [0] * n_modes
    for h in header[1 + n_modes:]:
        match = re.fullmatch(r"u(\d+)_(\d+)", h)
        if not match:
            raise ValueError(f"{path}: unexpected column {h!r}")
        dims[int(match.group(1)) - 1] += 1
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    if data.shape[1] != 1 + n_modes + sum(dims):
        raise ValueError(f"{path}: row width does not match header")
    times = data[:, 0]
    weights = data[:, 1:1 + n_modes]
    inputs, col = [], 1 + n_modes
    for k in dims:
        inputs.append(data[:, col:col + k])
        col += k
    return EmbeddedControl(times, weights, tuple(inputs))


def write_ordinary_csv(v: OrdinaryControl, path) -> None:
    """One row per node: t, active mode index, active input components."""
    kmax = max((u.shape[1] for u in v.inputs), default=0)
    header = ["t", "mode"] + [f"u_{c + 1}" for c in range(kmax)]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for j in range(v.times.size):
            i = int(v.mode[j])
            u = v.inputs[i][j]
            row = [_fmt(v.times[j]), str(i)]
            row += [_fmt(u[c]) if c < u.size else _fmt(0.0) for c in range(kmax)]
            out.writerow(row)

"""Switched-mode system descriptions: per-mode dynamics, costs and control sets.

A system is a collection of modes, each with control-affine dynamics

    f_i(x, u) = dyn_phi_i(x) @ u + dyn_psi_i(x)

a running cost ``L_i(t, x, u)`` that is convex in ``u``, and a control set
``U_i``.  All model callables broadcast over a leading batch axis: ``x`` may
be ``(n,)`` or ``(B, n)`` and results gain the same leading axis.  Evaluators
must be pure functions so a model can be shared read-only between solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "ControlSet",
    "ModeSpec",
    "HybridModel",
    "eval_mode_dynamics",
    "eval_mode_dynamics_jac",
    "eval_run_cost",
    "eval_run_cost_grad_x",
    "affine_quadratic_model",
    "check_model_derivatives",
]


def _frozen(a, dtype=float) -> np.ndarray:
    """Copy ``a`` into a read-only float array."""
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Admissible input values of one mode: a (possibly unbounded) box.

    ``lower``/``upper`` have the mode's control dimension; entries may be
    ``-inf``/``+inf``.  A zero-dimensional set marks a pure switch mode with
    no continuous input.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _frozen(np.atleast_1d(self.lower))
        hi = _frozen(np.atleast_1d(self.upper))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("control set bounds must be 1-d arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("control set has lower > upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def empty(cls) -> "ControlSet":
        return cls(np.zeros(0), np.zeros(0))

    @classmethod
    def box(cls, lower, upper) -> "ControlSet":
        return cls(lower, upper)

    @classmethod
    def unbounded(cls, dim: int) -> "ControlSet":
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def kind(self) -> str:
        if self.dim == 0:
            return "empty"
        if np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)):
            return "box"
        return "unbounded"

    def clamp(self, u: np.ndarray) -> np.ndarray:
        """Project ``u`` onto the box, componentwise."""
        return np.clip(u, self.lower, self.upper)

    def excess(self, u: np.ndarray) -> float:
        """Largest distance by which ``u`` leaves the box (0 if inside)."""
        if self.dim == 0:
            return 0.0
        over = np.maximum(u - self.upper, 0.0)
        under = np.maximum(self.lower - u, 0.0)
        return float(np.max(np.maximum(over, under), initial=0.0))


@dataclass(frozen=True, eq=False)
class ModeSpec:
    """One dynamic regime of a switched system.

    ``dyn_phi(x) -> (..., n, k)`` and ``dyn_psi(x) -> (..., n)`` give the
    control-affine dynamics; ``dyn_phi_jac(x) -> (..., n, k, n)`` and
    ``dyn_psi_jac(x) -> (..., n, n)`` their state Jacobians (index order:
    output row, input column, differentiation direction).  For pure switch
    modes (``control_dim == 0``) the phi callables may be ``None``.

    ``run_cost(t, x, u)`` must be convex in ``u`` on the control set.  When
    the u-dependence is exactly ``u @ diag(quad_r_diag) @ u`` the pointwise
    Hamiltonian minimizer has a closed form and ``quad_r_diag`` should be
    set; otherwise supply ``pointwise_min(t, x, p) -> u``.
    """

    control_dim: int
    control_set: ControlSet
    dyn_psi: Callable
    dyn_psi_jac: Callable
    run_cost: Callable
    run_cost_grad_x: Callable
    dyn_phi: Optional[Callable] = None
    dyn_phi_jac: Optional[Callable] = None
    pointwise_min: Optional[Callable] = None
    quad_r_diag: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.control_dim < 0:
            raise ValueError("control_dim must be >= 0")
        if self.control_set.dim != self.control_dim:
            raise ValueError(
                f"control set dimension {self.control_set.dim} does not match "
                f"control_dim {self.control_dim}"
            )
        if self.control_dim > 0 and (self.dyn_phi is None or self.dyn_phi_jac is None):
            raise ValueError("modes with inputs need dyn_phi and dyn_phi_jac")
        if self.quad_r_diag is not None:
            r = _frozen(np.atleast_1d(self.quad_r_diag))
            if r.shape != (self.control_dim,):
                raise ValueError("quad_r_diag length must equal control_dim")
            if self.control_set.kind == "unbounded" and np.any(r <= 0):
                raise ValueError(
                    "unbounded control set requires strictly positive quad_r_diag "
                    "(the Hamiltonian minimizer would not exist)"
                )
            object.__setattr__(self, "quad_r_diag", r)


@dataclass(frozen=True, eq=False)
class HybridModel:
    """A switched-mode optimal control problem on the horizon ``[0, t_f]``.

    ``terminal_cost``/``terminal_cost_grad`` act on the final state.  When a
    portion of the terminal cost is a constraint penalty that reports should
    be able to exclude, supply it separately as ``terminal_penalty`` (it must
    already be included in ``terminal_cost``).  ``domain_warning(x)`` is an
    optional predicate marking states outside the dynamics' natural domain
    (where evaluators fall back to clamped arguments).

    ``mixture_dynamics(x, weights, input_rows)``, when given, must equal
    ``sum_i weights[i] * f_i(x, input_rows[i])`` at a single point; it lets
    the integrator's inner loop skip the per-mode dispatch.  Purely an
    optimization hook -- integration falls back to the mode sum without it.
    """

    state_dim: int
    modes: tuple
    terminal_cost: Callable
    terminal_cost_grad: Callable
    x0: np.ndarray
    t_f: float
    domain_warning: Optional[Callable] = None
    terminal_penalty: Optional[Callable] = None
    mixture_dynamics: Optional[Callable] = None
    name: str = ""

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        if len(self.modes) < 1:
            raise ValueError("a model needs at least one mode")
        if self.t_f <= 0:
            raise ValueError("t_f must be positive")
        x0 = _frozen(self.x0)
        if x0.shape != (self.state_dim,):
            raise ValueError(f"x0 must have shape ({self.state_dim},)")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "modes", tuple(self.modes))

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def mode(self, i: int) -> ModeSpec:
        if not 0 <= i < self.n_modes:
            raise ValueError(f"mode index {i} out of range [0, {self.n_modes})")
        return self.modes[i]


def _check_shapes(model: HybridModel, i: int, x, u):
    mode = model.mode(i)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.state_dim:
        raise ValueError(f"state has trailing dimension {x.shape[-1]}, "
                         f"expected {model.state_dim}")
    if u is None:
        u = np.zeros(x.shape[:-1] + (mode.control_dim,))
    else:
        u = np.asarray(u, dtype=float)
        if u.ndim == 0:
            u = u.reshape(1)
        if u.shape[-1] != mode.control_dim:
            raise ValueError(f"input has trailing dimension {u.shape[-1]}, "
                             f"expected {mode.control_dim} for mode {i}")
    return mode, x, u


def eval_mode_dynamics(model: HybridModel, i: int, x, u=None) -> np.ndarray:
    """Evaluate ``f_i(x, u) = dyn_phi_i(x) @ u + dyn_psi_i(x)``."""
    mode, x, u = _check_shapes(model, i, x, u)
    out = np.asarray(mode.dyn_psi(x), dtype=float)
    if mode.control_dim > 0:
        out = out + np.einsum("...nk,...k->...n", mode.dyn_phi(x), u)
    return out


def eval_mode_dynamics_jac(model: HybridModel, i: int, x, u=None) -> np.ndarray:
    """State Jacobian ``df_i/dx`` at ``(x, u)``."""
    mode, x, u = _check_shapes(model, i, x, u)
    jac = np.asarray(mode.dyn_psi_jac(x), dtype=float)
    if mode.control_dim > 0:
        jac = jac + np.einsum("...nkd,...k->...nd", mode.dyn_phi_jac(x), u)
    return jac


def eval_run_cost(model: HybridModel, i: int, x, u=None, t=0.0):
    """Running cost ``L_i(t, x, u)`` (scalar, or ``(B,)`` for batched input)."""
    mode, x, u = _check_shapes(model, i, x, u)
    return np.asarray(mode.run_cost(t, x, u), dtype=float)[()]


def eval_run_cost_grad_x(model: HybridModel, i: int, x, u=None, t=0.0) -> np.ndarray:
    """State gradient ``dL_i/dx`` at ``(t, x, u)``."""
    mode, x, u = _check_shapes(model, i, x, u)
    return np.asarray(mode.run_cost_grad_x(t, x, u), dtype=float)


# ---------------------------------------------------------------------------
# Affine-quadratic model class
# ---------------------------------------------------------------------------

def _const_matrix(mat: np.ndarray) -> Callable:
    def f(x):
        x = np.asarray(x)
        return np.broadcast_to(mat, x.shape[:-1] + mat.shape)
    return f


def _quadform(Q: np.ndarray, dx: np.ndarray):
    return np.einsum("...i,ij,...j->...", dx, Q, dx)


def affine_quadratic_model(spec: Mapping) -> HybridModel:
    """Build a model with linear mode dynamics and quadratic costs.

    ``spec`` is a JSON-compatible mapping::

        {
          "state_dim": n, "x0": [...], "t_f": T,
          "modes": [
            {"A": [[...]], "B": [[...]] or null, "d": [...],
             "Q": [[...]], "q": [...], "R": [r_1, ...], "c": 0.0,
             "u_lo": [...] or null, "u_hi": [...] or null},
            ...
          ],
          "terminal": {"P": [[...]], "xref": [...], "c": 0.0},
        }

    Mode dynamics are ``A x + d + B u`` and the running cost is
    ``(x - q)' Q (x - q) + u' diag(R) u + c``; the terminal cost is
    ``(x - xref)' P (x - xref) + c``.  Omitting ``B`` (or passing null)
    makes a pure switch mode.  Omitting both bounds leaves the input
    unconstrained, which requires every entry of ``R`` to be positive.
    The closed-form box minimizer of the Hamiltonian is attached to every
    mode with an input.
    """
    spec = dict(spec)
    n = int(spec["state_dim"])
    modes = []
    for idx, m in enumerate(spec["modes"]):
        A = _frozen(m["A"])
        if A.shape != (n, n):
            raise ValueError(f"mode {idx}: A must be {n}x{n}")
        d = _frozen(m.get("d", np.zeros(n)))
        if d.shape != (n,):
            raise ValueError(f"mode {idx}: d must have length {n}")
        Q = _frozen(m.get("Q", np.zeros((n, n))))
        q = _frozen(m.get("q", np.zeros(n)))
        c = float(m.get("c", 0.0))
        B = m.get("B")
        if B is None:
            k = 0
            cset = ControlSet.empty()
            r = np.zeros(0)
        else:
            B = _frozen(B)
            if B.ndim != 2 or B.shape[0] != n:
                raise ValueError(f"mode {idx}: B must be {n}xk")
            k = B.shape[1]
            r = _frozen(np.atleast_1d(m["R"]))
            if r.shape != (k,):
                raise ValueError(f"mode {idx}: R must list {k} diagonal entries")
            lo, hi = m.get("u_lo"), m.get("u_hi")
            if lo is None and hi is None:
                cset = ControlSet.unbounded(k)
            else:
                cset = ControlSet.box(
                    np.full(k, -np.inf) if lo is None else lo,
                    np.full(k, np.inf) if hi is None else hi,
                )
            if np.any(r <= 0):
                if cset.kind == "unbounded":
                    raise ValueError(
                        f"mode {idx}: non-positive R entry with an unbounded "
                        "control set; the Hamiltonian minimizer may not exist"
                    )
                raise ValueError(f"mode {idx}: R entries must be positive")

        def psi(x, A=A, d=d):
            return np.asarray(x) @ A.T + d

        def run_cost(t, x, u, Q=Q, q=q, r=r, c=c):
            val = _quadform(Q, np.asarray(x) - q) + c
            if r.size:
                val = val + np.einsum("...k,k,...k->...", u, r, u)
            return val

        def run_cost_grad_x(t, x, u, Q=Q, q=q):
            return 2.0 * ((np.asarray(x) - q) @ Q.T)

        mode_kwargs = dict(
            control_dim=k,
            control_set=cset,
            dyn_psi=psi,
            dyn_psi_jac=_const_matrix(A),
            run_cost=run_cost,
            run_cost_grad_x=run_cost_grad_x,
        )
        if k > 0:
            mode_kwargs.update(
                dyn_phi=_const_matrix(B),
                dyn_phi_jac=_const_matrix(np.zeros((n, k, n))),
                quad_r_diag=r,
            )
        modes.append(ModeSpec(**mode_kwargs))

    A_all = [m_spec.dyn_psi_jac(np.zeros(n)) for m_spec in modes]
    d_all = [m_spec.dyn_psi(np.zeros(n)) for m_spec in modes]
    B_all = [m_spec.dyn_phi(np.zeros(n)) if m_spec.control_dim else None
             for m_spec in modes]

    def mixture(x, weights, input_rows):
        out = np.zeros(n)
        for i in range(len(modes)):
            a = weights[i]
            if a == 0.0:
                continue
            f = A_all[i] @ x + d_all[i]
            if B_all[i] is not None:
                f = f + B_all[i] @ input_rows[i]
            out += a * f
        return out

    term = dict(spec.get("terminal", {}))
    P = _frozen(term.get("P", np.zeros((n, n))))
    xref = _frozen(term.get("xref", np.zeros(n)))
    cterm = float(term.get("c", 0.0))

    def terminal_cost(x):
        return float(_quadform(P, np.asarray(x) - xref) + cterm)

    def terminal_cost_grad(x):
        return 2.0 * ((np.asarray(x) - xref) @ P.T)

    return HybridModel(
        state_dim=n,
        modes=tuple(modes),
        terminal_cost=terminal_cost,
        terminal_cost_grad=terminal_cost_grad,
        x0=spec["x0"],
        t_f=float(spec["t_f"]),
        mixture_dynamics=mixture,
        name=str(spec.get("name", "affine_quadratic")),
    )


# ---------------------------------------------------------------------------
# Derivative self-check
# ---------------------------------------------------------------------------

def _central_diff_jac(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(f(x), dtype=float))
    jac = np.empty(f0.shape + (x.size,))
    for d in range(x.size):
        e = np.zeros_like(x)
        e[d] = h * max(1.0, abs(x[d]))
        jac[..., d] = (np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2 * e[d])
    return jac


def _rel_err(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1.0))


def check_model_derivatives(model: HybridModel, rng: np.random.Generator,
                            x_low, x_high, n_points: int = 100,
                            x_filter: Optional[Callable] = None) -> dict:
    """Compare declared Jacobians/gradients with central finite differences.

    States are drawn uniformly from ``[x_low, x_high]`` (componentwise) and
    rejected while ``x_filter(x)`` is false, inputs uniformly from each
    mode's box (or ``[-2, 2]`` per unbounded coordinate).  Returns a dict of
    worst relative errors, keyed by ``dyn_jac``, ``cost_grad`` and
    ``terminal_grad``.
    """
    x_low = np.broadcast_to(np.asarray(x_low, dtype=float), (model.state_dim,))
    x_high = np.broadcast_to(np.asarray(x_high, dtype=float), (model.state_dim,))
    worst = {"dyn_jac": 0.0, "cost_grad": 0.0, "terminal_grad": 0.0}
    for _ in range(n_points):
        x = rng.uniform(x_low, x_high)
        while x_filter is not None and not x_filter(x):
            x = rng.uniform(x_low, x_high)
        t = float(rng.uniform(0.0, model.t_f))
        for i, mode in enumerate(model.modes):
            lo = np.where(np.isfinite(mode.control_set.lower),
                          mode.control_set.lower, -2.0)
            hi = np.where(np.isfinite(mode.control_set.upper),
                          mode.control_set.upper, 2.0)
            u = rng.uniform(lo, hi)
            fd = _central_diff_jac(lambda xx: eval_mode_dynamics(model, i, xx, u), x)
            worst["dyn_jac"] = max(
                worst["dyn_jac"],
                _rel_err(eval_mode_dynamics_jac(model, i, x, u), fd))
            fd = _central_diff_jac(
                lambda xx: np.atleast_1d(eval_run_cost(model, i, xx, u, t)), x)[0]
            worst["cost_grad"] = max(
                worst["cost_grad"],
                _rel_err(eval_run_cost_grad_x(model, i, x, u, t), fd))
        fd = _central_diff_jac(
            lambda xx: np.atleast_1d(model.terminal_cost(xx)), x)[0]
        worst["terminal_grad"] = max(
            worst["terminal_grad"], _rel_err(model.terminal_cost_grad(x), fd))
    return worst

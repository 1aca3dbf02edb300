import numpy as np
import pytest

from switchopt import (ControlSet, HybridModel, ModeSpec, affine_quadratic_model,
                       builtin_model, check_model_derivatives,
                       eval_mode_dynamics, eval_mode_dynamics_jac,
                       eval_run_cost, eval_run_cost_grad_x)
from instances import central_diff, random_instance

SQRT2 = np.sqrt(2.0)


# ---------------------------------------------------------------------------
# control sets
# ---------------------------------------------------------------------------

def test_control_set_kinds():
    assert ControlSet.empty().kind == "empty"
    assert ControlSet.box([-1.0], [1.0]).kind == "box"
    assert ControlSet.unbounded(2).kind == "unbounded"
    assert ControlSet([0.0, -np.inf], [1.0, np.inf]).kind == "unbounded"


def test_control_set_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        ControlSet([1.0], [0.0])


def test_control_set_clamp_and_excess():
    box = ControlSet.box([-1.0, 0.0], [1.0, 2.0])
    assert np.allclose(box.clamp([5.0, -3.0]), [1.0, 0.0])
    assert box.excess([1.001, 1.0]) == pytest.approx(1e-3)
    assert box.excess([0.5, 1.0]) == 0.0


# ---------------------------------------------------------------------------
# mode dynamics and costs
# ---------------------------------------------------------------------------

def test_tank_mode_dynamics_value():
    model = builtin_model("double_tank")
    f = eval_mode_dynamics(model, 1, np.array([2.0, 2.0]))
    assert np.allclose(f, [2.0 - SQRT2, 0.0], atol=1e-12)


def test_tank_clamps_negative_levels():
    model = builtin_model("double_tank")
    f = eval_mode_dynamics(model, 0, np.array([-0.5, -0.5]))
    assert np.allclose(f, [1.0, 0.0])
    assert model.domain_warning(np.array([-0.5, -0.5]))
    assert not model.domain_warning(np.array([0.5, 0.5]))


def test_lqr_mode_dynamics_value():
    model = builtin_model("unstable_lqr")
    f = eval_mode_dynamics(model, 0, np.array([0.0, 2.0]), np.array([0.0]))
    assert np.allclose(f, [2.4, 6.8])


def test_zero_gain_dynamics_ignore_input():
    model = affine_quadratic_model({
        "state_dim": 2, "x0": [0.0, 0.0], "t_f": 1.0,
        "modes": [{"A": [[0.0, 1.0], [-1.0, 0.0]], "d": [0.5, 0.0],
                   "B": [[0.0], [0.0]], "R": [1.0]}],
    })
    x = np.array([0.3, -0.7])
    f0 = eval_mode_dynamics(model, 0, x, np.array([0.0]))
    f9 = eval_mode_dynamics(model, 0, x, np.array([9.0]))
    assert np.allclose(f0, f9)


def test_tank_dynamics_jacobian_value():
    model = builtin_model("double_tank")
    jac = eval_mode_dynamics_jac(model, 0, np.array([2.0, 2.0]))
    expect = np.array([[-1.0 / (2 * SQRT2), 0.0],
                       [1.0 / (2 * SQRT2), -1.0 / (2 * SQRT2)]])
    assert np.allclose(jac, expect, atol=1e-12)


def test_lti_jacobian_is_state_matrix():
    model = builtin_model("unstable_lqr")
    jac = eval_mode_dynamics_jac(model, 1, np.array([3.0, -1.0]), np.array([2.0]))
    assert np.allclose(jac, [[4.0, 3.0], [-1.0, 0.0]])


def test_run_cost_values():
    tank = builtin_model("double_tank")
    # reference value is 2.5 at t = 0
    assert eval_run_cost(tank, 0, np.array([1.0, 2.5]), t=0.0) == pytest.approx(0.0)
    damper = builtin_model("mass_spring_damper")
    val = eval_run_cost(damper, 1, np.array([0.0, 0.0]), np.array([1.0]))
    assert val == pytest.approx(1.2)
    lqr = builtin_model("unstable_lqr")
    assert eval_run_cost(lqr, 0, np.array([0.0, 2.0]), np.array([0.0])) == 0.0


def test_dimension_mismatch_raises():
    model = builtin_model("unstable_lqr")
    with pytest.raises(ValueError):
        eval_mode_dynamics(model, 0, np.array([1.0, 2.0, 3.0]), np.array([0.0]))
    with pytest.raises(ValueError):
        eval_mode_dynamics(model, 0, np.array([1.0, 2.0]), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        eval_mode_dynamics(model, 5, np.array([1.0, 2.0]), np.array([0.0]))


# ---------------------------------------------------------------------------
# built-in registry
# ---------------------------------------------------------------------------

def test_builtin_parameters():
    tank = builtin_model("double_tank")
    assert tank.n_modes == 2 and tank.state_dim == 2
    assert np.allclose(tank.x0, [2.0, 2.0]) and tank.t_f == 30.0
    lqr = builtin_model("unstable_lqr")
    assert np.allclose(lqr.x0, [0.0, 2.0]) and lqr.t_f == 2.0
    damper = builtin_model("mass_spring_damper")
    assert np.allclose(damper.x0, [3.0, 4.0]) and damper.t_f == 12.0
    assert damper.modes[0].control_set.upper[0] == 10.0


def test_builtin_unknown_name():
    with pytest.raises(KeyError):
        builtin_model("triple_tank")


def test_builtin_override():
    tank = builtin_model("double_tank", {"t_f": 10.0})
    assert tank.t_f == 10.0
    with pytest.raises(ValueError):
        builtin_model("double_tank", {"gravity": 9.81})


def test_damper_terminal_cost_includes_penalty():
    damper = builtin_model("mass_spring_damper")
    x = np.array([1.0, -2.0])
    assert damper.terminal_cost(x) == pytest.approx(1 + 4 + 5 + 120)
    assert damper.terminal_penalty(x) == pytest.approx(5 + 120)


def test_damper_spring_jacobian_uses_left_branch_at_break():
    damper = builtin_model("mass_spring_damper")
    jac = eval_mode_dynamics_jac(damper, 0, np.array([1.0, 0.0]), np.array([0.0]))
    assert jac[1, 0] == pytest.approx(-1.0)
    jac = eval_mode_dynamics_jac(damper, 0, np.array([1.0 + 1e-9, 0.0]),
                                 np.array([0.0]))
    assert jac[1, 0] == pytest.approx(-3.0)


# ---------------------------------------------------------------------------
# affine-quadratic class
# ---------------------------------------------------------------------------

def _lqr_spec():
    return {
        "state_dim": 2, "x0": [0.0, 2.0], "t_f": 2.0,
        "modes": [
            {"A": [[0.6, 1.2], [-0.8, 3.4]], "B": [[1.0], [1.0]],
             "Q": [[0.0, 0.0], [0.0, 0.5]], "q": [0.0, 2.0], "R": [0.5]},
            {"A": [[4.0, 3.0], [-1.0, 0.0]], "B": [[2.0], [-1.0]],
             "Q": [[0.0, 0.0], [0.0, 0.5]], "q": [0.0, 2.0], "R": [0.5]},
        ],
        "terminal": {"P": [[0.5, 0.0], [0.0, 0.5]], "xref": [4.0, 2.0]},
    }


def test_affine_quadratic_matches_builtin_lqr(rng):
    generic = affine_quadratic_model(_lqr_spec())
    builtin = builtin_model("unstable_lqr")
    for _ in range(100):
        i = int(rng.integers(0, 2))
        x = rng.normal(0.0, 3.0, 2)
        u = rng.normal(0.0, 3.0, 1)
        assert np.allclose(eval_mode_dynamics(generic, i, x, u),
                           eval_mode_dynamics(builtin, i, x, u))
        assert eval_run_cost(generic, i, x, u) == pytest.approx(
            eval_run_cost(builtin, i, x, u))
    x = rng.normal(0.0, 3.0, 2)
    assert generic.terminal_cost(x) == pytest.approx(builtin.terminal_cost(x))


def test_affine_quadratic_rejects_nonpositive_r_unbounded():
    spec = _lqr_spec()
    spec["modes"][0]["R"] = [0.0]
    with pytest.raises(ValueError):
        affine_quadratic_model(spec)


def test_affine_quadratic_pure_switch_mode():
    model = affine_quadratic_model({
        "state_dim": 1, "x0": [1.0], "t_f": 1.0,
        "modes": [{"A": [[-1.0]], "B": None}],
    })
    assert model.modes[0].control_dim == 0
    assert model.modes[0].control_set.kind == "empty"


def test_unbounded_set_requires_positive_quadratic_weight():
    with pytest.raises(ValueError):
        ModeSpec(control_dim=1, control_set=ControlSet.unbounded(1),
                 dyn_psi=lambda x: x, dyn_psi_jac=lambda x: np.eye(1),
                 run_cost=lambda t, x, u: 0.0,
                 run_cost_grad_x=lambda t, x, u: np.zeros(1),
                 dyn_phi=lambda x: np.ones((1, 1)),
                 dyn_phi_jac=lambda x: np.zeros((1, 1, 1)),
                 quad_r_diag=np.array([0.0]))


# ---------------------------------------------------------------------------
# structural invariants
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name,x_low,x_high", [
    ("double_tank", 0.3, 5.0),
    ("unstable_lqr", -4.0, 4.0),
    ("mass_spring_damper", -4.0, 4.0),
])
def test_dynamics_affine_in_input(rng, name, x_low, x_high):
    model = builtin_model(name)
    for i, mode in enumerate(model.modes):
        for _ in range(20):
            x = rng.uniform(x_low, x_high, model.state_dim)
            u = rng.uniform(-3.0, 3.0, mode.control_dim)
            v = rng.uniform(-3.0, 3.0, mode.control_dim)
            mid = eval_mode_dynamics(model, i, x, (u + v) / 2)
            avg = (eval_mode_dynamics(model, i, x, u)
                   + eval_mode_dynamics(model, i, x, v)) / 2
            assert np.allclose(mid, avg, rtol=0.0, atol=1e-13)


@pytest.mark.parametrize("name", ["double_tank", "unstable_lqr",
                                  "mass_spring_damper"])
def test_run_cost_midpoint_convex_in_input(rng, name):
    model = builtin_model(name)
    for i, mode in enumerate(model.modes):
        lo = np.where(np.isfinite(mode.control_set.lower),
                      mode.control_set.lower, -5.0)
        hi = np.where(np.isfinite(mode.control_set.upper),
                      mode.control_set.upper, 5.0)
        for _ in range(30):
            x = rng.uniform(-3.0, 3.0, model.state_dim)
            t = rng.uniform(0.0, model.t_f)
            u = rng.uniform(lo, hi)
            v = rng.uniform(lo, hi)
            mid = eval_run_cost(model, i, x, (u + v) / 2, t)
            avg = (eval_run_cost(model, i, x, u, t)
                   + eval_run_cost(model, i, x, v, t)) / 2
            assert mid <= avg + 1e-12


@pytest.mark.parametrize("name,x_low,x_high", [
    ("double_tank", 0.3, 5.0),
    ("unstable_lqr", -4.0, 4.0),
    ("mass_spring_damper", -4.0, 4.0),
])
def test_builtin_derivatives_match_finite_differences(rng, name, x_low, x_high):
    model = builtin_model(name)
    # keep clear of the clamped square roots and the spring break point
    x_filter = None
    if name == "mass_spring_damper":
        x_filter = lambda x: abs(x[0] - 1.0) > 1e-2
    worst = check_model_derivatives(model, rng, x_low, x_high, n_points=100,
                                    x_filter=x_filter)
    assert max(worst.values()) < 1e-4, worst


def test_random_instance_derivatives(rng):
    model = random_instance(rng)
    worst = check_model_derivatives(model, rng, -2.0, 2.0, n_points=40)
    assert max(worst.values()) < 1e-4, worst


def test_tank_cost_gradient_tracks_reference(rng):
    model = builtin_model("double_tank")
    for t in (0.0, 7.3, 21.1):
        x = rng.uniform(0.5, 4.0, 2)
        grad = eval_run_cost_grad_x(model, 0, x, t=t)
        fd = central_diff(
            lambda xx: np.atleast_1d(eval_run_cost(model, 0, xx, t=t)), x)[0]
        assert np.allclose(grad, fd, rtol=1e-6, atol=1e-8)


def test_batched_evaluation_matches_pointwise(rng):
    model = builtin_model("mass_spring_damper")
    xs = rng.uniform(-3.0, 3.0, (40, 2))
    us = rng.uniform(-9.0, 9.0, (40, 1))
    ts = rng.uniform(0.0, 12.0, 40)
    for i in range(2):
        batch_f = eval_mode_dynamics(model, i, xs, us)
        batch_jac = eval_mode_dynamics_jac(model, i, xs, us)
        batch_cost = model.modes[i].run_cost(ts, xs, us)
        for j in range(40):
            assert np.allclose(batch_f[j], eval_mode_dynamics(model, i, xs[j], us[j]))
            assert np.allclose(batch_jac[j],
                               eval_mode_dynamics_jac(model, i, xs[j], us[j]))
            assert batch_cost[j] == pytest.approx(
                eval_run_cost(model, i, xs[j], us[j], ts[j]))


def test_model_validation_errors():
    with pytest.raises(ValueError):
        HybridModel(state_dim=0, modes=(), terminal_cost=lambda x: 0.0,
                    terminal_cost_grad=lambda x: np.zeros(0), x0=np.zeros(0),
                    t_f=1.0)
    tank = builtin_model("double_tank")
    with pytest.raises(ValueError):
        HybridModel(state_dim=2, modes=tank.modes, terminal_cost=lambda x: 0.0,
                    terminal_cost_grad=lambda x: np.zeros(2),
                    x0=np.zeros(2), t_f=-1.0)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from switchopt import (EmbeddedControl, OrdinaryControl, blend, builtin_model,
                       make_grid, pwm_project, read_control_csv, sample,
                       validate, write_control_csv)
from instances import random_embedded, random_instance, random_ordinary


@pytest.fixture
def tank():
    return builtin_model("double_tank")


@pytest.fixture
def damper():
    return builtin_model("mass_spring_damper")


# ---------------------------------------------------------------------------
# grids and construction
# ---------------------------------------------------------------------------

def test_make_grid_counts():
    times = make_grid(30.0, 0.01)
    assert times.size == 3001
    assert times[0] == 0.0 and times[-1] == 30.0
    assert abs(times.size - 1) * 0.01 - 30.0 <= 1e-9


def test_make_grid_rejects_nondividing_step():
    with pytest.raises(ValueError):
        make_grid(1.0, 0.3)


def test_uniform_control(tank):
    w = EmbeddedControl.uniform(tank, 0.1)
    assert w.n_nodes == 301 and w.n_modes == 2
    assert np.allclose(w.weights, 0.5)
    assert validate(w, tank).ok


def test_one_hot_control_clamps_inputs(damper):
    w = EmbeddedControl.one_hot(damper, 0.1, mode=1, mode_inputs=[[99.0], [-99.0]])
    assert np.allclose(w.weights[:, 1], 1.0)
    assert np.allclose(w.inputs[0], 10.0)
    assert np.allclose(w.inputs[1], -10.0)


def test_control_arrays_immutable(tank):
    w = EmbeddedControl.uniform(tank, 0.1)
    with pytest.raises(ValueError):
        w.weights[0, 0] = 2.0


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_sample_endpoints_and_floor(tank):
    w = EmbeddedControl.uniform(tank, 0.01)
    assert sample(w, 0.0).weights is not None
    node = sample(w, 0.015)
    assert np.allclose(node.weights, w.weights[1])
    assert np.allclose(sample(w, 30.0).weights, w.weights[-1])
    # node boundary lands on the node itself despite float division
    assert np.allclose(sample(w, 0.03).weights, w.weights[3])
    with pytest.raises(ValueError):
        sample(w, 30.5)
    with pytest.raises(ValueError):
        sample(w, -0.2)


# ---------------------------------------------------------------------------
# blend
# ---------------------------------------------------------------------------

def _hot(times, mode_ix, inputs):
    mode = np.full(times.size, mode_ix, dtype=int)
    return OrdinaryControl(times, mode, inputs)


def test_blend_identity_at_zero(rng):
    model = random_instance(rng)
    w = random_embedded(rng, model, model.t_f / 20)
    u_star = random_ordinary(rng, model, model.t_f / 20)
    y = blend(w, u_star, 0.0)
    assert y is w


def test_blend_full_step_is_one_hot(rng):
    model = random_instance(rng)
    w = random_embedded(rng, model, model.t_f / 20)
    u_star = random_ordinary(rng, model, model.t_f / 20)
    y = blend(w, u_star, 1.0)
    hot = np.zeros_like(w.weights)
    hot[np.arange(w.n_nodes), u_star.mode] = 1.0
    assert np.allclose(y.weights, hot, atol=1e-15)
    for i in range(model.n_modes):
        active = u_star.mode == i
        assert np.allclose(y.inputs[i][active], u_star.inputs[i][active])


def test_blend_worked_example():
    times = make_grid(1.0, 0.5)
    w = EmbeddedControl(times, np.full((3, 2), 0.5),
                        (np.full((3, 1), 3.0), np.full((3, 1), -1.0)))
    u_star = _hot(times, 0, (np.full((3, 1), 6.0), np.zeros((3, 1))))
    y = blend(w, u_star, 0.5)
    # weights (0.75, 0.25); mixing fraction 2/3 on the active mode
    assert np.allclose(y.weights, [0.75, 0.25])
    assert np.allclose(y.inputs[0], 3.0 / 3 + 2 * 6.0 / 3)
    assert np.allclose(y.inputs[1], -1.0)


def test_blend_grid_mismatch(tank):
    w = EmbeddedControl.uniform(tank, 0.1)
    other = EmbeddedControl.uniform(tank, 0.2)
    u_star = _hot(other.times, 0, other.inputs)
    with pytest.raises(ValueError):
        blend(w, u_star, 0.5)
    with pytest.raises(ValueError):
        blend(w, _hot(w.times, 0, w.inputs), 1.5)


@settings(max_examples=25, deadline=None)
@given(lam=st.floats(0.0, 1.0), seed=st.integers(0, 2**32 - 1))
def test_blend_preserves_simplex_and_mass_identity(lam, seed):
    rng = np.random.default_rng(seed)
    model = random_instance(rng, n_modes=3, state_dim=2)
    dt = model.t_f / 8
    w = random_embedded(rng, model, dt)
    u_star = random_ordinary(rng, model, dt)
    y = blend(w, u_star, lam)
    assert validate(y, model).ok
    hot = np.zeros_like(w.weights)
    hot[np.arange(w.n_nodes), u_star.mode] = 1.0
    for i in range(model.n_modes):
        # mode mass times input equals the measure-level convex combination
        left = y.weights[:, i:i + 1] * y.inputs[i]
        right = ((1 - lam) * w.weights[:, i:i + 1] * w.inputs[i]
                 + lam * hot[:, i:i + 1] * u_star.inputs[i])
        assert np.allclose(left, right, atol=1e-12)


# ---------------------------------------------------------------------------
# PWM projection
# ---------------------------------------------------------------------------

def test_pwm_constant_one_hot(tank):
    w = EmbeddedControl.one_hot(tank, 0.01, mode=0)
    v = pwm_project(w, 0.1)
    assert np.all(v.mode == 0)


def test_pwm_even_split(tank):
    w = EmbeddedControl.uniform(tank, 0.01)
    v = pwm_project(w, 0.1)
    first_cycle = v.mode[:10]
    assert np.all(first_cycle[:5] == 0) and np.all(first_cycle[5:] == 1)


def test_pwm_duty_matches_weights_within_one_step(rng, tank):
    w = random_embedded(rng, tank, 0.01)
    v = pwm_project(w, 0.1)
    for start in range(0, 3000, 10):
        counts = np.bincount(v.mode[start:start + 10], minlength=2)
        target = w.weights[start:start + 10].mean(axis=0) * 10
        assert np.all(np.abs(counts - target) <= 1.0 + 1e-9)


def test_pwm_rejects_subgrid_cycle(tank):
    w = EmbeddedControl.uniform(tank, 0.01)
    with pytest.raises(ValueError):
        pwm_project(w, 0.005)


def test_pwm_inputs_time_matched(rng, damper):
    w = random_embedded(rng, damper, 0.1)
    v = pwm_project(w, 0.4)
    for i in range(2):
        assert np.allclose(v.inputs[i], w.inputs[i])
    emb = v.to_embedded()
    assert validate(emb, damper).ok
    assert np.all(emb.weights.sum(axis=1) == 1.0)


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

def test_validate_flags_weight_sum(tank):
    w = EmbeddedControl.uniform(tank, 0.1)
    weights = w.weights.copy()
    weights[7] = [0.49, 0.49]
    bad = EmbeddedControl(w.times, weights, w.inputs)
    report = validate(bad, tank)
    assert not report.ok
    assert report.worst == pytest.approx(0.02)
    assert report.kind == "weight sum" and report.node == 7


def test_validate_flags_box_violation(rng, damper):
    w = EmbeddedControl.uniform(damper, 0.1)
    inputs = tuple(u.copy() for u in w.inputs)
    inputs[1][3, 0] = 10.001
    bad = EmbeddedControl(w.times, w.weights, inputs)
    report = validate(bad, damper)
    assert not report.ok
    assert report.worst == pytest.approx(1e-3)
    assert report.node == 3 and report.mode == 1
    assert "node 3" in str(report)


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------

def test_control_csv_roundtrip_bit_exact(rng, damper, tmp_path):
    w = random_embedded(rng, damper, 0.1)
    path = tmp_path / "control.csv"
    write_control_csv(w, path)
    back = read_control_csv(path)
    assert np.array_equal(back.times, w.times)
    assert np.array_equal(back.weights, w.weights)
    for a, b in zip(back.inputs, w.inputs):
        assert np.array_equal(a, b)


def test_control_csv_pure_switch_modes(tank, tmp_path):
    w = EmbeddedControl.uniform(tank, 0.5)
    path = tmp_path / "tank.csv"
    write_control_csv(w, path)
    back = read_control_csv(path)
    assert back.n_modes == 2
    assert all(u.shape == (61, 0) for u in back.inputs)


def test_read_control_csv_rejects_garbage(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        read_control_csv(path)

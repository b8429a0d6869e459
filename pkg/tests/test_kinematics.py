"""Vehicle model tests: polar-state consistency, articulation relation, integration."""

import math

import numpy as np
import pytest

from forestnav.errors import DegenerateTarget
from forestnav.kinematics import (
    DEFAULT_PARAMS,
    VehicleParams,
    VehicleState,
    articulation_rate,
    front_yaw_rate,
    gamma_rate_for_yaw,
    polar_derivatives,
    step_states_array,
    step_vehicle,
    to_polar,
    wrap_angle,
)


def test_wrap_angle_range():
    for a in [-7.0, -math.pi, -1e-9, 0.0, 1.0, math.pi, 9.0, 4 * math.pi]:
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-12)
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-12)
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)


def test_to_polar_collinear():
    s = VehicleState(x=0.0, y=0.0, theta1=0.0, gamma=0.0)
    p = to_polar(s, (5.0, 0.0))
    assert p.r == pytest.approx(5.0)
    assert p.phi == pytest.approx(0.0)
    assert p.delta == pytest.approx(0.0)


def test_to_polar_side_target():
    s = VehicleState(x=0.0, y=0.0, theta1=0.0, gamma=0.0)
    p = to_polar(s, (0.0, 5.0))
    assert p.r == pytest.approx(5.0)
    assert abs(p.phi) == pytest.approx(math.pi / 2)
    assert abs(p.delta) == pytest.approx(math.pi / 2)
    # Fixed convention: target to the left gives negative phi and delta.
    assert p.phi == pytest.approx(-math.pi / 2)
    assert p.delta == pytest.approx(-math.pi / 2)


def test_to_polar_degenerate():
    s = VehicleState(x=1.0, y=2.0, theta1=0.3, gamma=0.0)
    with pytest.raises(DegenerateTarget):
        to_polar(s, (1.0, 2.0 + 1e-9))


def test_polar_derivatives_head_on():
    from forestnav.kinematics import PolarState

    p = PolarState(r=3.0, phi=0.0, delta=0.0)
    assert polar_derivatives(p, 1.0, 0.0) == pytest.approx((-1.0, 0.0, 0.0))


def test_polar_derivatives_broadside():
    from forestnav.kinematics import PolarState

    p = PolarState(r=2.0, phi=0.0, delta=math.pi / 2)
    r_dot, phi_dot, delta_dot = polar_derivatives(p, 1.0, 0.0)
    assert r_dot == pytest.approx(0.0, abs=1e-12)
    assert phi_dot == pytest.approx(0.5)
    assert delta_dot == pytest.approx(0.5)


def test_polar_rate_consistency_random_trajectories():
    """Central differences of to_polar along simulated motion must match the
    analytic polar rates; this single check pins the sign convention."""
    rng = np.random.default_rng(7)
    params = DEFAULT_PARAMS
    dt = 1e-4
    worst = 0.0
    for _ in range(100):
        s = VehicleState(
            x=rng.uniform(-10, 10),
            y=rng.uniform(-10, 10),
            theta1=rng.uniform(-math.pi, math.pi),
            gamma=rng.uniform(-0.5, 0.5),
        )
        target = (rng.uniform(-10, 10), rng.uniform(-10, 10))
        if math.hypot(target[0] - s.x, target[1] - s.y) < 0.5:
            continue
        v = rng.uniform(0.2, params.v_max)
        gd = rng.uniform(-0.3, 0.3)
        s_prev = step_vehicle(s, (-v, -gd), dt, params)
        s_next = step_vehicle(s, (v, gd), dt, params)
        p_prev = to_polar(s_prev, target)
        p0 = to_polar(s, target)
        p_next = to_polar(s_next, target)
        fd = (
            (p_next.r - p_prev.r) / (2 * dt),
            wrap_angle(p_next.phi - p_prev.phi) / (2 * dt),
            wrap_angle(p_next.delta - p_prev.delta) / (2 * dt),
        )
        theta1_dot = front_yaw_rate(v, s.gamma, gd, params)
        an = polar_derivatives(p0, v, theta1_dot)
        worst = max(worst, max(abs(a - b) for a, b in zip(fd, an)))
    assert worst < 1e-5


def test_articulation_rate_zero():
    assert articulation_rate(0.0, 2.0, 0.0, DEFAULT_PARAMS) == 0.0


def test_articulation_rate_substitution_simple():
    params = VehicleParams(l1=1.0, l2=1.0, gamma_max=1.0, gamma_rate_max=1.0, v_max=2.0)
    assert articulation_rate(0.0, 1.0, math.pi / 6, params) == pytest.approx(0.5)


def test_articulation_rate_substitution_oracle():
    # -((1.2+0.8)/0.8)*0.3 + sin(0.2)/0.8*0.5, computed by hand before build
    params = VehicleParams(l1=1.2, l2=0.8, gamma_max=1.0, gamma_rate_max=1.0, v_max=2.0)
    got = articulation_rate(0.3, 0.5, 0.2, params)
    assert got == pytest.approx(-0.6258316682530867, abs=1e-15)


def test_gamma_rate_for_yaw_inverts_front_yaw_rate():
    rng = np.random.default_rng(3)
    for _ in range(50):
        v = rng.uniform(-1.5, 1.5)
        gamma = rng.uniform(-0.6, 0.6)
        gd = rng.uniform(-0.4, 0.4)
        th1d = front_yaw_rate(v, gamma, gd, DEFAULT_PARAMS)
        assert gamma_rate_for_yaw(th1d, v, gamma, DEFAULT_PARAMS) == pytest.approx(gd, abs=1e-12)


def test_commanded_bend_settles_at_matching_turn():
    """Holding a constant yaw-rate command through gamma_rate_for_yaw must
    settle gamma at the steady bend, not run it into the stop."""
    params = DEFAULT_PARAMS
    s = VehicleState(x=0.0, y=0.0, theta1=0.0, gamma=0.0)
    v, omega = 1.0, 0.15  # rad/s, within the steady envelope
    for _ in range(2000):
        gd = gamma_rate_for_yaw(omega, v, s.gamma, params)
        s = step_vehicle(s, (v, gd), 0.02, params)
    expected = math.asin((params.l1 + params.l2) * omega / v)
    assert s.gamma == pytest.approx(expected, abs=1e-6)


def test_step_straight_line():
    s = VehicleState(x=0.0, y=0.0, theta1=0.7, gamma=0.0)
    params = DEFAULT_PARAMS
    for _ in range(50):
        s = step_vehicle(s, (1.0, 0.0), 0.02, params)
    assert s.theta1 == pytest.approx(0.7, abs=0.0)  # heading preserved exactly
    assert s.gamma == 0.0
    dist = math.hypot(s.x, s.y)
    assert dist == pytest.approx(1.0, abs=1e-12)


def test_step_constant_gamma_is_circular_arc():
    """Constant articulation with zero rate traces a circle; fit and check."""
    params = DEFAULT_PARAMS
    gamma = 0.4
    s = VehicleState(x=0.0, y=0.0, theta1=0.0, gamma=gamma)
    pts = []
    for _ in range(1000):
        s = step_vehicle(s, (1.0, 0.0), 0.02, params)
        pts.append((s.x, s.y))
    pts = np.asarray(pts)
    # Kasa algebraic circle fit, independent of the model equations.
    a = np.column_stack([2 * pts[:, 0], 2 * pts[:, 1], np.ones(len(pts))])
    b = (pts**2).sum(axis=1)
    (cx, cy, c), *_ = np.linalg.lstsq(a, b, rcond=None)
    radius = math.sqrt(c + cx**2 + cy**2)
    dists = np.hypot(pts[:, 0] - cx, pts[:, 1] - cy)
    assert np.max(np.abs(dists - radius)) < 1e-6
    expected_radius = (params.l1 + params.l2) / math.sin(gamma)
    assert radius == pytest.approx(expected_radius, rel=1e-6)


def test_rk4_matches_fine_euler():
    """RK4 at dt=0.02 vs Euler at dt=1e-5 over a 10 s varying maneuver.

    Commands are piecewise constant over the 0.02 s control intervals for
    both integrators, so the comparison isolates integration error.
    """
    params = DEFAULT_PARAMS

    def cmd(k: int) -> tuple[float, float]:
        return (1.0, 0.25 * math.sin(0.5 * k * 0.02))

    s_rk = VehicleState(x=0.0, y=0.0, theta1=0.0, gamma=0.0)
    for k in range(500):
        s_rk = step_vehicle(s_rk, cmd(k), 0.02, params)

    s_eu = VehicleState(x=0.0, y=0.0, theta1=0.0, gamma=0.0)
    for k in range(500):
        c = cmd(k)
        for _ in range(2000):
            s_eu = step_vehicle(s_eu, c, 1e-5, params, method="euler")

    assert math.hypot(s_rk.x - s_eu.x, s_rk.y - s_eu.y) < 1e-4


def test_articulation_limit_saturates():
    params = DEFAULT_PARAMS
    s = VehicleState(x=0.0, y=0.0, theta1=0.0, gamma=0.55)
    for _ in range(100):
        s = step_vehicle(s, (0.5, params.gamma_rate_max), 0.05, params)
        assert abs(s.gamma) <= params.gamma_max
    assert s.gamma == pytest.approx(params.gamma_max)
    assert s.saturated


def test_reversibility():
    params = DEFAULT_PARAMS
    s0 = VehicleState(x=1.0, y=-2.0, theta1=0.4, gamma=0.1)
    fwd = step_vehicle(s0, (0.8, 0.2), 0.02, params)
    back = step_vehicle(fwd, (-0.8, -0.2), 0.02, params)
    assert math.hypot(back.x - s0.x, back.y - s0.y) < 1e-8
    assert abs(wrap_angle(back.theta1 - s0.theta1)) < 1e-8
    assert abs(back.gamma - s0.gamma) < 1e-8


def test_step_dt_validation():
    s = VehicleState(x=0.0, y=0.0, theta1=0.0, gamma=0.0)
    with pytest.raises(ValueError):
        step_vehicle(s, (1.0, 0.0), 0.2, DEFAULT_PARAMS)
    with pytest.raises(ValueError):
        step_vehicle(s, (1.0, 0.0), 0.0, DEFAULT_PARAMS)


def test_batched_step_matches_scalar():
    rng = np.random.default_rng(11)
    params = DEFAULT_PARAMS
    states = np.column_stack(
        [
            rng.uniform(-5, 5, 32),
            rng.uniform(-5, 5, 32),
            rng.uniform(-3, 3, 32),
            rng.uniform(-0.55, 0.55, 32),
        ]
    )
    v = rng.uniform(0.2, 1.4, 32)
    gd = rng.uniform(-0.5, 0.5, 32)
    batched = step_states_array(states.copy(), v, gd, 0.02, params)
    for i in range(32):
        s = VehicleState(*states[i])
        out = step_vehicle(s, (v[i], gd[i]), 0.02, params)
        assert np.allclose(
            batched[i], [out.x, out.y, out.theta1, out.gamma], atol=1e-12
        ), i

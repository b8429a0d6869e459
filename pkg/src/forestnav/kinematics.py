"""Kinematics of a center-articulated vehicle (CAV).

World-frame forward model, the polar relative state toward a target point,
and the relation between front-body yaw rate and articulation speed. The
vehicle is steered by bending at the central joint: the front body (heading
theta1) carries the front axle at distance l1 ahead of the joint, the rear
body trails at l2 behind it, and the articulation angle gamma is the bend
between the two bodies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTarget

TAU = 2.0 * math.pi
EPS_TARGET = 1e-6  # m; targets closer than this are degenerate
MAX_STEP_DT = 0.1  # s; integration step ceiling


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    r = math.remainder(a, TAU)
    return r + TAU if r <= -math.pi else r


def wrap_angle_array(a):
    """Vectorized wrap to (-pi, pi]."""
    r = np.remainder(np.asarray(a, dtype=float) + math.pi, TAU) - math.pi
    return np.where(r <= -math.pi, r + TAU, r)


@dataclass(frozen=True)
class VehicleParams:
    """Geometry and actuation limits, SI units."""

    l1: float                 # articulation point to front axle, m
    l2: float                 # articulation point to rear axle, m
    gamma_max: float          # articulation limit, rad
    gamma_rate_max: float     # rad/s
    v_max: float              # m/s
    v_min: float = 0.0        # m/s

    def __post_init__(self):
        if self.l1 <= 0.0 or self.l2 <= 0.0:
            raise ValueError("l1 and l2 must be positive")
        if not 0.0 < self.gamma_max < math.pi / 2:
            raise ValueError("gamma_max must lie in (0, pi/2)")
        if self.gamma_rate_max <= 0.0:
            raise ValueError("gamma_rate_max must be positive")
        if not self.v_max > self.v_min >= 0.0:
            raise ValueError("need v_max > v_min >= 0")

    @property
    def kappa_max(self) -> float:
        """Steady-state path curvature at full articulation, 1/m."""
        return math.sin(self.gamma_max) / (self.l1 + self.l2)

    @classmethod
    def from_dict(cls, cfg: dict, prefix: str = "vehicle.") -> "VehicleParams":
        g = lambda k, d=None: cfg.get(prefix + k, d)
        return cls(
            l1=float(g("l1")),
            l2=float(g("l2")),
            gamma_max=float(g("gamma_max")),
            gamma_rate_max=float(g("gamma_rate_max")),
            v_max=float(g("v_max")),
            v_min=float(g("v_min", 0.0)),
        )


# Desk-scale compact harvester: short coupled bodies, wide articulation range.
# Chosen so the point-tracking capture basin covers broadside targets at 3 m.
DEFAULT_PARAMS = VehicleParams(
    l1=0.65, l2=0.6, gamma_max=0.9, gamma_rate_max=1.0, v_max=1.4, v_min=0.3
)


@dataclass(frozen=True)
class VehicleState:
    """Pose of the front body plus articulation; heading kept in (-pi, pi]."""

    x: float
    y: float
    theta1: float             # front-body heading, rad
    gamma: float              # articulation angle, rad
    v: float = 0.0            # signed forward speed of the last step, m/s
    saturated: bool = False   # commands were clamped producing this state

    def __post_init__(self):
        object.__setattr__(self, "theta1", wrap_angle(self.theta1))

    @property
    def front_position(self) -> tuple[float, float]:
        return (self.x, self.y)

    @property
    def theta2(self) -> float:
        """Rear-body heading."""
        return wrap_angle(self.theta1 - self.gamma)


@dataclass(frozen=True)
class PolarState:
    """Relative state toward a target point: distance and two angles.

    r is the distance from the front-axle center to the target. phi is the
    negated world bearing of the target seen from the vehicle; delta is the
    front-body heading measured from the line of sight to the target. Both
    angles are in (-pi, pi]. This convention makes the polar rates satisfy

        r_dot     = -v cos(delta)
        phi_dot   =  v sin(delta) / r
        delta_dot =  v sin(delta) / r + theta1_dot

    exactly, which the finite-difference consistency tests pin down.
    """

    r: float
    phi: float
    delta: float

    def __post_init__(self):
        if self.r < 0.0:
            raise ValueError("r must be non-negative")
        object.__setattr__(self, "phi", wrap_angle(self.phi))
        object.__setattr__(self, "delta", wrap_angle(self.delta))


def to_polar(state: VehicleState, target: tuple[float, float]) -> PolarState:
    """Relative polar state of `target` as seen from the vehicle."""
    dx = target[0] - state.x
    dy = target[1] - state.y
    r = math.hypot(dx, dy)
    if r <= EPS_TARGET:
        raise DegenerateTarget(f"target within {EPS_TARGET} m of the vehicle")
    alpha = math.atan2(dy, dx)  # world bearing to the target
    return PolarState(r=r, phi=wrap_angle(-alpha), delta=wrap_angle(state.theta1 - alpha))


def polar_derivatives(
    p: PolarState, v: float, theta1_dot: float
) -> tuple[float, float, float]:
    """Time derivatives (r_dot, phi_dot, delta_dot) of the polar state."""
    if p.r <= EPS_TARGET:
        raise DegenerateTarget("polar state has degenerate range")
    s = math.sin(p.delta)
    return (
        -v * math.cos(p.delta),
        v * s / p.r,
        v * s / p.r + theta1_dot,
    )


def articulation_rate(
    theta1_dot: float, v: float, gamma: float, params: VehicleParams
) -> float:
    """Published articulation-speed relation for a front-body yaw rate at speed v.

    Kept in its printed form as the reference relation. Note that the forward
    model and the controllers pair through gamma_rate_for_yaw / front_yaw_rate
    below, whose transient coupling term carries the opposite sign: that sign
    is required for the bend angle to settle at the steady value matching a
    commanded turn instead of running away to the mechanical stop.
    """
    return -(params.l1 + params.l2) / params.l2 * theta1_dot + math.sin(gamma) / params.l2 * v


def front_yaw_rate(
    v: float, gamma: float, gamma_dot: float, params: VehicleParams
) -> float:
    """Front-body yaw rate of the forward model under (v, gamma, gamma_dot).

    Steady state (gamma_dot = 0) turns on a circle of radius
    (l1 + l2) / sin(gamma); transiently, bending the joint swings the front
    body toward the bend, so a commanded turn is a stable equilibrium of the
    articulation angle.
    """
    return (v * math.sin(gamma) + params.l2 * gamma_dot) / (params.l1 + params.l2)


def gamma_rate_for_yaw(
    theta1_dot: float, v: float, gamma: float, params: VehicleParams
) -> float:
    """Articulation-rate command realizing a desired front yaw rate; inverse
    of front_yaw_rate."""
    return ((params.l1 + params.l2) * theta1_dot - v * math.sin(gamma)) / params.l2


def _clamp_command(
    state: VehicleState, v: float, gamma_dot: float, dt: float, params: VehicleParams
) -> tuple[float, float, bool]:
    """Clamp speed and articulation rate to limits, including the angle stop."""
    vc = min(max(v, -params.v_max), params.v_max)
    gd = min(max(gamma_dot, -params.gamma_rate_max), params.gamma_rate_max)
    # Rate that would run past the articulation stop is cut so the stop is
    # reached exactly at the end of the step.
    lo = (-params.gamma_max - state.gamma) / dt
    hi = (params.gamma_max - state.gamma) / dt
    gd = min(max(gd, lo), hi)
    saturated = (vc != v) or (gd != gamma_dot)
    return vc, gd, saturated


def step_vehicle(
    state: VehicleState,
    cmd: tuple[float, float],
    dt: float,
    params: VehicleParams,
    method: str = "rk4",
) -> VehicleState:
    """Advance the world-frame CAV model one step under (v, gamma_dot).

    The front body translates along its heading at v; the front yaw rate
    follows from (v, gamma, gamma_dot) through the articulation relation.
    Commands are clamped to the actuation limits and to the articulation
    stop; clamping is reported on the returned state's `saturated` flag.
    """
    if not 0.0 < dt <= MAX_STEP_DT:
        raise ValueError(f"dt must lie in (0, {MAX_STEP_DT}] s")
    v, gd, saturated = _clamp_command(state, cmd[0], cmd[1], dt, params)
    denom = params.l1 + params.l2

    def deriv(theta: float, gamma: float) -> tuple[float, float, float, float]:
        return (
            v * math.cos(theta),
            v * math.sin(theta),
            (v * math.sin(gamma) + params.l2 * gd) / denom,
            gd,
        )

    x, y, th, ga = state.x, state.y, state.theta1, state.gamma
    if method == "euler":
        dx, dy, dth, dga = deriv(th, ga)
        x, y, th, ga = x + dx * dt, y + dy * dt, th + dth * dt, ga + dga * dt
    elif method == "rk4":
        k1 = deriv(th, ga)
        k2 = deriv(th + 0.5 * dt * k1[2], ga + 0.5 * dt * k1[3])
        k3 = deriv(th + 0.5 * dt * k2[2], ga + 0.5 * dt * k2[3])
        k4 = deriv(th + dt * k3[2], ga + dt * k3[3])
        x += dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        y += dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        th += dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        ga += dt / 6.0 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
    else:
        raise ValueError(f"unknown integrator {method!r}")

    # Float fuzz from the stop-exact rate clamp.
    ga = min(max(ga, -params.gamma_max), params.gamma_max)
    return VehicleState(x=x, y=y, theta1=th, gamma=ga, v=v, saturated=saturated)


def step_states_array(
    states: np.ndarray, v, gamma_dot, dt: float, params: VehicleParams
) -> np.ndarray:
    """Batched RK4 step over an (N, 4) array of (x, y, theta1, gamma) rows.

    Mirrors step_vehicle's clamping and integration (identical stage math);
    used by the primitive generator and the tracking bench where per-call
    overhead matters. `v` and `gamma_dot` may be scalars or (N,) arrays.
    """
    v = np.minimum(np.maximum(np.asarray(v, dtype=float), -params.v_max), params.v_max)
    gd = np.minimum(
        np.maximum(np.asarray(gamma_dot, dtype=float), -params.gamma_rate_max),
        params.gamma_rate_max,
    )
    ga0 = states[:, 3]
    gd = np.minimum(np.maximum(gd, (-params.gamma_max - ga0) / dt), (params.gamma_max - ga0) / dt)
    denom = params.l1 + params.l2

    def deriv(th, ga):
        dth = np.sin(ga)
        dth *= v
        dth += params.l2 * gd
        dth /= denom
        return v * np.cos(th), v * np.sin(th), dth

    th, ga = states[:, 2], states[:, 3]
    x1, y1, t1 = deriv(th, ga)
    x2, y2, t2 = deriv(th + 0.5 * dt * t1, ga + 0.5 * dt * gd)
    x3, y3, t3 = deriv(th + 0.5 * dt * t2, ga + 0.5 * dt * gd)
    x4, y4, t4 = deriv(th + dt * t3, ga + dt * gd)
    out = np.empty_like(states)
    c = dt / 6.0
    out[:, 0] = states[:, 0] + c * (x1 + 2 * x2 + 2 * x3 + x4)
    out[:, 1] = states[:, 1] + c * (y1 + 2 * y2 + 2 * y3 + y4)
    out[:, 2] = th + c * (t1 + 2 * t2 + 2 * t3 + t4)
    out[:, 3] = np.minimum(np.maximum(ga + dt * gd, -params.gamma_max), params.gamma_max)
    return out

"""Backstepping point-tracking controller for the articulated vehicle.

The cascade splits the polar state into a slow subsystem (r, phi) steered
by the virtual control delta_ref = arctan(k_phi * phi) and a fast heading
error delta regulated onto delta_ref by a curvature law. The commanded
curvature maps to a front yaw rate (theta1_dot = kappa * v) and then to an
articulation-rate command. A geometric pure-pursuit controller is kept as
the comparison baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DegenerateTarget
from .kinematics import (
    PolarState,
    VehicleParams,
    VehicleState,
    gamma_rate_for_yaw,
    to_polar,
    wrap_angle,
)


@dataclass(frozen=True)
class ControllerGains:
    """Backstepping gains and the curvature-based speed heuristic.

    Defaults sit near the (1 + k_phi)(1 + k_delta) = 2 manifold where the
    law holds a constant-curvature path without a steady offset: the
    lookahead-chasing curvature command then matches the path curvature
    exactly on arcs, and the remaining gain margin damps transients.
    """

    k_phi: float = 0.5
    k_delta: float = 0.45
    beta: float = 0.6        # speed reduction strength, [0, 1)
    lam: float = 1.0         # curvature exponent
    kappa_max: float = 0.26  # 1/m; normalization point of the speed law

    def __post_init__(self):
        if self.k_phi <= 0.0 or self.k_delta <= 0.0:
            raise ValueError("k_phi and k_delta must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.lam <= 0.0 or self.kappa_max <= 0.0:
            raise ValueError("lam and kappa_max must be positive")
        if self.beta * self.kappa_max**self.lam >= 1.0:
            raise ValueError("beta * kappa_max**lam must stay below 1")

    @classmethod
    def from_dict(cls, cfg: dict, prefix: str = "gains.") -> "ControllerGains":
        g = lambda k, d: cfg.get(prefix + k, d)
        return cls(
            k_phi=float(g("k_phi", 0.5)),
            k_delta=float(g("k_delta", 0.45)),
            beta=float(g("beta", 0.6)),
            lam=float(g("lam", 1.0)),
            kappa_max=float(g("kappa_max", 0.26)),
        )

    @classmethod
    def for_vehicle(cls, params: VehicleParams, **kwargs) -> "ControllerGains":
        """Gains with kappa_max tied to the vehicle's articulation limit."""
        return cls(kappa_max=params.kappa_max, **kwargs)


@dataclass(frozen=True)
class DriveCommand:
    """Controller output: speed, articulation rate, diagnostic curvature."""

    v: float           # m/s
    gamma_dot: float   # rad/s
    kappa: float       # 1/m, commanded path curvature
    saturated: bool = False


def delta_ref(phi: float, k_phi: float) -> float:
    """Virtual heading reference for the slow subsystem; range (-pi/2, pi/2)."""
    return math.atan(k_phi * phi)


def steering_law(
    p: PolarState, dref: float, dref_dot: float, k_delta: float
) -> float:
    """Curvature command regulating delta onto dref.

    `dref_dot` is the reference rate per unit arc length (time rate divided
    by speed), keeping every term in 1/m; theta1_dot = kappa * v downstream.
    """
    if p.r <= 1e-6:
        raise DegenerateTarget("steering law undefined at zero range")
    return (
        -(1.0 / p.r) * k_delta * (p.delta - dref)
        - math.sin(p.delta) / p.r
        - dref_dot
    )


def speed_heuristic(kappa: float, gains: ControllerGains, params: VehicleParams) -> float:
    """Curvature-based speed choice, clamped to [v_min, v_max].

    The raw law v_max * (1 - beta|k|^lam) / (1 - beta|kappa_max|^lam)
    exceeds v_max for |kappa| below kappa_max (its normalization puts the
    maximum at kappa_max, not zero), so the clamp is active on straights;
    slowdown engages only for commanded curvature beyond kappa_max.
    """
    raw = params.v_max * (1.0 - gains.beta * abs(kappa) ** gains.lam) / (
        1.0 - gains.beta * abs(gains.kappa_max) ** gains.lam
    )
    return min(max(raw, params.v_min), params.v_max)


def track(
    state: VehicleState,
    target: tuple[float, float],
    gains: ControllerGains,
    params: VehicleParams,
) -> DriveCommand:
    """Backstepping command toward a target point.

    The virtual control is driven by the bearing of the target in the
    front-body frame (phi_b = -delta, so the head-on course is the
    equilibrium regardless of world orientation), with the reference rate
    derived analytically from the polar kinematics.
    """
    p = to_polar(state, target)
    phi_b = wrap_angle(-p.delta)
    dref = delta_ref(phi_b, gains.k_phi)
    # d/ds of delta_ref via phi' = sin(delta)/r (arc-length form of Eq. rates)
    phi_rate = math.sin(p.delta) / p.r
    dref_dot = gains.k_phi * phi_rate / (1.0 + (gains.k_phi * phi_b) ** 2)
    kappa = steering_law(p, dref, dref_dot, gains.k_delta)
    v = speed_heuristic(kappa, gains, params)
    gd = gamma_rate_for_yaw(kappa * v, v, state.gamma, params)
    gd_c = min(max(gd, -params.gamma_rate_max), params.gamma_rate_max)
    v_c = min(max(v, params.v_min), params.v_max)
    return DriveCommand(
        v=v_c, gamma_dot=gd_c, kappa=kappa, saturated=(gd_c != gd or v_c != v)
    )


def pure_pursuit(
    state: VehicleState,
    target: tuple[float, float],
    gains: ControllerGains,
    params: VehicleParams,
    lookahead_dist: float | None = None,
) -> DriveCommand:
    """Geometric pure-pursuit baseline adapted to the articulated vehicle.

    With `lookahead_dist` unset, the exact chord form kappa =
    2 sin(bearing) / r reproduces a circle's curvature from any on-path
    pose. With a fixed design lookahead L, the classic simple form
    kappa = 2 y_local / L^2 is used instead.
    """
    p = to_polar(state, target)
    bearing = wrap_angle(-p.delta)  # target bearing in the front-body frame
    if lookahead_dist is None:
        kappa = 2.0 * math.sin(bearing) / p.r
    else:
        kappa = 2.0 * p.r * math.sin(bearing) / (lookahead_dist * lookahead_dist)
    v = speed_heuristic(kappa, gains, params)
    gd = gamma_rate_for_yaw(kappa * v, v, state.gamma, params)
    gd_c = min(max(gd, -params.gamma_rate_max), params.gamma_rate_max)
    return DriveCommand(v=v, gamma_dot=gd_c, kappa=kappa, saturated=gd_c != gd)

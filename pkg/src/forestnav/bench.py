"""Benchmark rollouts: cross-track accuracy over the primitive library.

Every leaf trajectory is replayed as a reference: the vehicle starts on the
first pose with the leaf's initial bend, drives at the leaf's own speed,
and steers at a fixed-arc lookahead point with either the backstepping law
or the classic pure-pursuit baseline. Rollouts run as one numpy batch
across all leaves; the batched control math mirrors the scalar controllers
and is pinned to them by tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .control import ControllerGains
from .kinematics import VehicleParams, step_states_array
from .primitives import PrimitiveLibrary

BENCH_LOOKAHEAD = 0.8  # m of arc ahead of the path projection


@dataclass
class TrackingResult:
    controller: str
    per_leaf_mean: np.ndarray    # (N,) mean cross-track error per leaf, m
    per_leaf_max: np.ndarray
    steps: int
    finished: np.ndarray         # (N,) bool

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.per_leaf_mean))

    @property
    def max_error(self) -> float:
        return float(np.max(self.per_leaf_max))


def wrap(a):
    return (np.asarray(a) + math.pi) % (2 * math.pi) - math.pi


def steering_batch(states, targets, gains: ControllerGains, mode: str,
                   pp_lookahead: float):
    """Batched curvature command; mirrors control.steering_law composition
    and control.pure_pursuit's classic fixed-lookahead form."""
    dx = targets[:, 0] - states[:, 0]
    dy = targets[:, 1] - states[:, 1]
    r = np.maximum(np.hypot(dx, dy), 1e-9)
    alpha = np.arctan2(dy, dx)
    delta = wrap(states[:, 2] - alpha)
    phi_b = wrap(-delta)
    if mode == "backstepping":
        dref = np.arctan(gains.k_phi * phi_b)
        phi_rate = np.sin(delta) / r
        dref_dot = gains.k_phi * phi_rate / (1.0 + (gains.k_phi * phi_b) ** 2)
        return -(1.0 / r) * gains.k_delta * (delta - dref) - np.sin(delta) / r - dref_dot
    if mode == "pure_pursuit":
        return 2.0 * r * np.sin(phi_b) / (pp_lookahead * pp_lookahead)
    raise ValueError(f"unknown controller {mode!r}")


def track_library(
    lib: PrimitiveLibrary,
    controller: str = "backstepping",
    gains: ControllerGains | None = None,
    lookahead_arc: float = BENCH_LOOKAHEAD,
    dt: float = 0.02,
    max_steps: int = 3000,
) -> TrackingResult:
    """Roll the controller along every leaf trajectory of every tree.

    Speed is the leaf's own root speed (tracking the trajectory, not just
    the path), so the reference articulation rates stay inside the
    vehicle's limits at any primitive speed.
    """
    params = lib.params
    if gains is None:
        gains = ControllerGains.for_vehicle(params)
    spacing = lib.config.pose_spacing
    refs, v_ref, gam0 = [], [], []
    for tree in lib.trees:
        for leaf in tree.leaf_ids:
            refs.append(tree.leaf_poses(int(leaf))[:, :2])
            root = tree.chain(int(leaf))[0]
            v_ref.append(float(tree.seg_v[root]))
            gam0.append(tree.initial_gamma)
    refs = np.stack(refs)                      # (N, P, 2)
    v_ref = np.asarray(v_ref)
    n, n_pts, _ = refs.shape
    total_arc = spacing * (n_pts - 1)

    states = np.zeros((n, 4))
    states[:, 3] = gam0
    seg_idx = np.zeros(n, dtype=int)
    err_sum = np.zeros(n)
    err_max = np.zeros(n)
    err_cnt = np.zeros(n, dtype=int)
    done = np.zeros(n, dtype=bool)
    rows = np.arange(n)

    step = 0
    for step in range(1, max_steps + 1):
        active = ~done
        if not active.any():
            break
        for _ in range(4):  # advance projections past finished segments
            a = refs[rows, seg_idx]
            b = refs[rows, np.minimum(seg_idx + 1, n_pts - 1)]
            seg = b - a
            seg_len2 = np.maximum(np.einsum("ns,ns->n", seg, seg), 1e-12)
            t_par = np.einsum("ns,ns->n", states[:, :2] - a, seg) / seg_len2
            bump = active & (t_par > 1.0) & (seg_idx < n_pts - 2)
            if not bump.any():
                break
            seg_idx[bump] += 1
        t_c = np.clip(t_par, 0.0, 1.0)
        foot = a + t_c[:, None] * seg
        dist = np.hypot(*(states[:, :2] - foot).T)
        proj_arc = (seg_idx + t_c) * spacing

        err_sum[active] += dist[active]
        err_max[active] = np.maximum(err_max[active], dist[active])
        err_cnt[active] += 1

        done |= active & (proj_arc >= total_arc - 1e-6)
        active = ~done
        if not active.any():
            break

        arc_t = np.minimum(proj_arc + lookahead_arc, total_arc)
        j = np.minimum((arc_t / spacing).astype(int), n_pts - 2)
        frac = arc_t / spacing - j
        target = refs[rows, j] + frac[:, None] * (refs[rows, j + 1] - refs[rows, j])

        kappa = steering_batch(states, target, gains, controller, lookahead_arc)
        gd = ((params.l1 + params.l2) * kappa * v_ref
              - v_ref * np.sin(states[:, 3])) / params.l2
        gd = np.clip(gd, -params.gamma_rate_max, params.gamma_rate_max)
        v = np.where(active, v_ref, 0.0)
        gd = np.where(active, gd, 0.0)
        states = step_states_array(states, v, gd, dt, params)

    per_mean = err_sum / np.maximum(err_cnt, 1)
    return TrackingResult(
        controller=controller,
        per_leaf_mean=per_mean,
        per_leaf_max=err_max,
        steps=step,
        finished=done.copy(),
    )


def compare_controllers(lib: PrimitiveLibrary, gains: ControllerGains | None = None,
                        lookahead_arc: float = BENCH_LOOKAHEAD, dt: float = 0.02):
    """Backstepping vs pure pursuit over the full library."""
    back = track_library(lib, "backstepping", gains, lookahead_arc, dt)
    pure = track_library(lib, "pure_pursuit", gains, lookahead_arc, dt)
    return {
        "backstepping": back,
        "pure_pursuit": pure,
        "mean_backstepping_m": back.mean_error,
        "mean_pure_pursuit_m": pure.mean_error,
        "improvement_pct": 100.0 * (1.0 - back.mean_error / max(pure.mean_error, 1e-12)),
    }

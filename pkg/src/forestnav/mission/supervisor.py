"""Supervised-autonomy mission loop.

One Mission owns all mutable state and advances deterministically per tick:
localize once in the prior map, navigate with the primitive planner and the
backstepping tracker while fusing labeled scans into the voxel map, stop in
front of the target tree, check the grasp, wait for the operator's cut
confirmation, and drive home. Operator commands arrive through a queue
consumed once per tick; every command is acknowledged with a reason.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from ..control import ControllerGains, track
from ..errors import LocalizationRejected, NoFeasiblePrimitive
from ..kinematics import DEFAULT_PARAMS, VehicleParams, VehicleState, step_vehicle, wrap_angle
from ..localization import RegistrationParams, localize, make_transform, voxel_downsample
from ..planner import CostWeights, build_obstacle_grid, plan_step
from ..primitives import PrimitiveLibrary, disc_centers
from ..sim import (
    DriftModel,
    DriftingOdometry,
    LidarPattern,
    simulate_lidar,
    step_dynamics,
)
from ..sim.odometry import calibrate_drift
from ..sim.world import ForestWorld
from ..voxelmap import MapConfig, TraversabilityMap


class Phase(str, Enum):
    IDLE = "Idle"
    LOCALIZING = "Localizing"
    NAVIGATING = "Navigating"
    APPROACHING = "Approaching"
    AWAIT_CONFIRM = "AwaitConfirm"
    CUTTING = "Cutting"
    RETURNING = "Returning"
    BLOCKED = "Blocked"
    INTERVENTION = "Intervention"


ALLOWED_TRANSITIONS = {
    (Phase.IDLE, Phase.LOCALIZING),
    (Phase.LOCALIZING, Phase.NAVIGATING),
    (Phase.LOCALIZING, Phase.BLOCKED),
    (Phase.NAVIGATING, Phase.APPROACHING),
    (Phase.NAVIGATING, Phase.BLOCKED),
    (Phase.NAVIGATING, Phase.INTERVENTION),
    (Phase.APPROACHING, Phase.AWAIT_CONFIRM),
    (Phase.APPROACHING, Phase.INTERVENTION),
    (Phase.APPROACHING, Phase.BLOCKED),
    (Phase.INTERVENTION, Phase.APPROACHING),
    (Phase.INTERVENTION, Phase.NAVIGATING),
    (Phase.INTERVENTION, Phase.BLOCKED),
    (Phase.AWAIT_CONFIRM, Phase.CUTTING),
    (Phase.AWAIT_CONFIRM, Phase.INTERVENTION),
    (Phase.CUTTING, Phase.RETURNING),
    (Phase.RETURNING, Phase.IDLE),
    (Phase.RETURNING, Phase.BLOCKED),
    (Phase.RETURNING, Phase.INTERVENTION),
    # Abort returns to Idle from anywhere.
    (Phase.LOCALIZING, Phase.IDLE),
    (Phase.NAVIGATING, Phase.IDLE),
    (Phase.APPROACHING, Phase.IDLE),
    (Phase.AWAIT_CONFIRM, Phase.IDLE),
    (Phase.CUTTING, Phase.IDLE),
    (Phase.INTERVENTION, Phase.IDLE),
    (Phase.BLOCKED, Phase.IDLE),
}

COMMAND_PHASES = {
    "select_target": {Phase.IDLE},
    "confirm_cut": {Phase.AWAIT_CONFIRM},
    "abort": set(Phase) - {Phase.IDLE},
    "manual_override": {Phase.NAVIGATING, Phase.APPROACHING, Phase.RETURNING,
                        Phase.INTERVENTION},
    "resume": {Phase.INTERVENTION},
    "reposition": {Phase.INTERVENTION, Phase.AWAIT_CONFIRM},
}


@dataclass(frozen=True)
class GraspModel:
    reach_min: float = 1.5
    reach_max: float = 4.5
    gripper_opening: float = 0.40
    arm_error: float = 0.05

    def __post_init__(self):
        if not self.reach_min < self.reach_max:
            raise ValueError("reach_min must be below reach_max")
        if not self.gripper_opening > 2 * self.arm_error:
            raise ValueError("gripper must open wider than twice the arm error")


def grasp_check(vehicle_pose, believed_tree, true_tree, arm: GraspModel,
                arm_error_sample) -> tuple[bool, float]:
    """One grasp attempt; returns (success, placement_offset_m).

    The arm is commanded to the believed tree position expressed relative
    to the believed vehicle pose; `vehicle_pose` here is where the machine
    actually is, so localization and drift errors land in the placement.
    """
    pose = np.asarray(vehicle_pose, dtype=float)
    reach_vec = np.asarray(believed_tree, dtype=float)  # relative, body frame
    reach = float(np.hypot(*reach_vec))
    c, s = math.cos(pose[2]), math.sin(pose[2])
    world_target = pose[:2] + np.array([c * reach_vec[0] - s * reach_vec[1],
                                        s * reach_vec[0] + c * reach_vec[1]])
    placed = world_target + np.asarray(arm_error_sample, dtype=float)
    offset = float(np.hypot(*(placed - np.asarray(true_tree, dtype=float)[:2])))
    ok = (arm.reach_min <= reach <= arm.reach_max) and offset < arm.gripper_opening / 2
    return ok, offset


@dataclass
class MissionMetrics:
    distance_driven: float = 0.0
    avg_speed: float = 0.0
    interventions: int = 0
    intervention_interval: float | None = None
    intervention_time_fraction: float = 0.0
    grasp_attempts: int = 0
    collisions: int = 0
    active_time: float = 0.0
    cut_done: bool = False
    success: bool = False
    result: str = "incomplete"

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MissionConfig:
    tick_dt: float = 0.2            # supervisor tick (scan + replan), s
    substeps: int = 10              # physics/control substeps per tick
    window: float = 24.0            # planning window, m
    lookahead_arc: float = 2.0
    approach_switch: float = 3.0    # m from the waypoint to leave planning
    approach_stop: float = 0.15
    approach_fraction: float = 0.7  # waypoint at this fraction of reach_max
    retry_limit: int = 5
    blocked_timeout: float = 30.0   # s of persistent culling failure
    return_timeout: float = 150.0
    max_time: float = 420.0
    auto_retry: bool = True
    label_noise: float = 0.1
    drift_rpe_pct: float = 3.35
    sensor_height: float = 2.3
    scan_beams: int = 12
    scan_azimuth_step_deg: float = 2.5
    scan_range: float = 20.0
    decay_every: int = 5            # ticks between dynamic-decay sweeps
    guess_shift: float = 0.5        # m, localization prior offset
    guess_yaw_deg: float = 5.0
    cut_duration: float = 1.0
    reposition_min: float = 3.0
    reposition_max: float = 5.0


class Mission:
    """Deterministic mission simulation with an operator command queue."""

    def __init__(
        self,
        world: ForestWorld,
        config: MissionConfig = MissionConfig(),
        seed: int = 0,
        params: VehicleParams = DEFAULT_PARAMS,
        library: PrimitiveLibrary | None = None,
        gains: ControllerGains | None = None,
        weights: CostWeights = CostWeights(),
        grasp: GraspModel = GraspModel(),
        target_tree: int | None = None,
    ):
        if library is None:
            raise ValueError("a primitive library is required")
        self.world = world
        self.config = config
        self.seed = seed
        self.params = params
        self.library = library
        self.gains = gains or ControllerGains.for_vehicle(params)
        self.weights = weights
        self.grasp = grasp

        ss = np.random.SeedSequence((seed, 0x4153))
        s_scan, s_arm, s_guess, s_misc = ss.spawn(4)
        self.rng_scan = np.random.default_rng(s_scan)
        self.rng_arm = np.random.default_rng(s_arm)
        self.rng_guess = np.random.default_rng(s_guess)
        self.rng_misc = np.random.default_rng(s_misc)

        heading = math.atan2(*(world.trail[1] - world.trail[0])[::-1])
        self.truth = VehicleState(x=world.spawn[0], y=world.spawn[1],
                                  theta1=heading, gamma=0.0)
        self.odometry = DriftingOdometry(
            calibrate_drift(DriftModel(rpe_pct=config.drift_rpe_pct, seed=seed))
        )
        self.est = self.odometry.update(self._truth_pose())
        self.vmap = TraversabilityMap(MapConfig(extent=config.scan_range + 10.0))
        self.pattern = LidarPattern(
            beams=config.scan_beams,
            azimuth_step=math.radians(config.scan_azimuth_step_deg),
            max_range=config.scan_range,
        )

        self.target_tree = (world.nearest_tree(world.far_point)
                            if target_tree is None else int(target_tree))
        self.tree_rel_est: np.ndarray | None = None  # believed tree, odom frame
        self.map_to_odom: np.ndarray | None = None

        self.phase = Phase.IDLE
        self.tick_index = 0
        self.t = 0.0
        self.events: list[dict] = []
        self.metrics = MissionMetrics()
        self._phase_time: dict[str, float] = {p.value: 0.0 for p in Phase}
        self._queue: list[tuple[dict, object]] = []
        self._blocked_since: float | None = None
        self._return_started: float | None = None
        self._grasp_failures = 0
        self._override_cmd: tuple[float, float] | None = None
        self._trail_states: list[VehicleState] = [self.truth]
        self._trail_arc: list[float] = [0.0]
        self._last_plan = None
        self._last_gamma_dot = 0.0
        self._last_cmd_v = 0.0
        self._phase_entry_hooks: dict[str, list[dict]] = {}
        self._tick_hooks: dict[int, list[dict]] = {}
        self._cut_until: float | None = None
        self.done = False
        self._log("phase", phase=self.phase.value)

    # Frames ---------------------------------------------------------------

    def _truth_pose(self) -> np.ndarray:
        return np.array([self.truth.x, self.truth.y, self.truth.theta1])

    def _est_state(self) -> VehicleState:
        return VehicleState(x=self.est[0], y=self.est[1], theta1=self.est[2],
                            gamma=self.truth.gamma, v=self.truth.v)

    def _world_to_odom(self, pts: np.ndarray) -> np.ndarray:
        """Re-express truth-frame points through the drifting estimate."""
        truth = self._truth_pose()
        dth = self.est[2] - truth[2]
        c, s = math.cos(dth), math.sin(dth)
        rel = pts[:, :2] - truth[:2]
        out = pts.copy()
        out[:, 0] = self.est[0] + c * rel[:, 0] - s * rel[:, 1]
        out[:, 1] = self.est[1] + s * rel[:, 0] + c * rel[:, 1]
        return out

    # Commands ---------------------------------------------------------------

    def submit(self, command: dict, reply=None) -> None:
        """Queue an operator command; consumed once at the next tick."""
        self._queue.append((command, reply))

    def schedule(self, script: list) -> None:
        """Attach a deterministic command schedule (see parse_script)."""
        for trigger, value, cmd in script:
            if trigger == "tick":
                self._tick_hooks.setdefault(int(value), []).append(cmd)
            else:
                self._phase_entry_hooks.setdefault(str(value), []).append(cmd)
                if str(value) == self.phase.value:  # already in that phase
                    self.submit(dict(cmd))

    def _ack(self, cmd: dict, reply, accepted: bool, reason: str) -> None:
        ack = {"v": 1, "type": "ack", "id": cmd.get("id"),
               "accepted": accepted, "reason": reason}
        self._log("ack", command=cmd.get("name"), accepted=accepted, reason=reason)
        if reply is not None:
            reply(ack)

    def _process_commands(self) -> None:
        queue, self._queue = self._queue, []
        for cmd, reply in queue:
            name = cmd.get("name")
            if name not in COMMAND_PHASES:
                self._ack(cmd, reply, False, f"unknown command {name!r}")
                continue
            if self.phase not in COMMAND_PHASES[name]:
                self._ack(cmd, reply, False,
                          f"{name} not valid in phase {self.phase.value}")
                continue
            self._log("command", name=name, args=cmd.get("args", {}))
            getattr(self, f"_cmd_{name}")(cmd.get("args") or {})
            self._ack(cmd, reply, True, "ok")

    def _cmd_select_target(self, args: dict) -> None:
        if "tree" in args:
            self.target_tree = int(args["tree"])
        elif "point" in args:
            self.target_tree = self.world.nearest_tree(args["point"])
        self._transition(Phase.LOCALIZING)

    def _cmd_confirm_cut(self, args: dict) -> None:
        self._cut_until = self.t + self.config.cut_duration
        self._transition(Phase.CUTTING)

    def _cmd_abort(self, args: dict) -> None:
        self._finish("aborted", success=False)

    def _cmd_manual_override(self, args: dict) -> None:
        if self.phase is not Phase.INTERVENTION:
            self.metrics.interventions += 1
            self._return_phase = self.phase
            self._transition(Phase.INTERVENTION)
        self._override_cmd = (float(args.get("v", 0.0)),
                              float(args.get("gamma_dot", 0.0)))

    def _cmd_resume(self, args: dict) -> None:
        self._override_cmd = None
        self._transition(Phase.NAVIGATING)

    def _cmd_reposition(self, args: dict) -> None:
        self._reposition()

    # Phase machinery --------------------------------------------------------

    def _transition(self, new: Phase) -> None:
        if new is self.phase:
            return
        if (self.phase, new) not in ALLOWED_TRANSITIONS:
            raise RuntimeError(f"illegal transition {self.phase.value} -> {new.value}")
        self.phase = new
        self._log("phase", phase=new.value)
        for cmd in self._phase_entry_hooks.get(new.value, []):
            self.submit(dict(cmd))

    def _finish(self, result: str, success: bool) -> None:
        self.metrics.result = result
        self.metrics.success = success and self.metrics.collisions == 0
        if self.phase is not Phase.IDLE:
            self.phase = Phase.IDLE
            self._log("phase", phase=self.phase.value)
        self.done = True

    def _log(self, kind: str, **data) -> None:
        self.events.append({"tick": self.tick_index, "t": round(self.t, 6),
                            "type": kind, **data})

    # Mission pieces -----------------------------------------------------------

    def _localize(self) -> None:
        scan = simulate_lidar(
            self.world,
            (self.truth.x, self.truth.y,
             float(self.world.ground_height(self.truth.x, self.truth.y))
             + self.config.sensor_height),
            LidarPattern(beams=24, azimuth_step=math.radians(1.5), max_range=40.0),
            rng=self.rng_scan,
        )
        # Scan into the vehicle frame (sensor pose = planar vehicle pose).
        truth = self._truth_pose()
        c, s = math.cos(-truth[2]), math.sin(-truth[2])
        rel = scan.points[:, :2] - truth[:2]
        local = np.column_stack([
            c * rel[:, 0] - s * rel[:, 1],
            s * rel[:, 0] + c * rel[:, 1],
            scan.points[:, 2],
        ])
        prior = self._prior_map()
        shift = self.rng_guess.uniform(-self.config.guess_shift,
                                       self.config.guess_shift, 2)
        dyaw = self.rng_guess.uniform(-1.0, 1.0) * math.radians(self.config.guess_yaw_deg)
        yaw = truth[2] + dyaw
        guess = make_transform(
            rotation=np.array([
                [math.cos(yaw), -math.sin(yaw), 0.0],
                [math.sin(yaw), math.cos(yaw), 0.0],
                [0.0, 0.0, 1.0],
            ]),
            translation=np.array([truth[0] + shift[0], truth[1] + shift[1], 0.0]),
        )
        est = localize(local, prior, guess, RegistrationParams())
        t_ws = est.transform
        yaw_ws = math.atan2(t_ws[1, 0], t_ws[0, 0])
        # Believed tree relative to the believed (odometry) pose: the map
        # says the sensor sits at t_ws, so express the tree in that frame.
        tree_w = self.world.tree_pos[self.target_tree]
        c2, s2 = math.cos(-yaw_ws), math.sin(-yaw_ws)
        rel_t = tree_w - t_ws[:2, 3]
        tree_body = np.array([c2 * rel_t[0] - s2 * rel_t[1],
                              s2 * rel_t[0] + c2 * rel_t[1]])
        # Anchor in the odometry frame via the current estimate.
        ce, se = math.cos(self.est[2]), math.sin(self.est[2])
        self.tree_rel_est = np.array([
            self.est[0] + ce * tree_body[0] - se * tree_body[1],
            self.est[1] + se * tree_body[0] + ce * tree_body[1],
        ])
        self.map_to_odom = t_ws
        self._log("localized", inlier_fraction=round(est.inlier_fraction, 4),
                  iterations=est.iterations,
                  tree_est=[round(float(v), 4) for v in self.tree_rel_est])

    _prior_cache = None

    def _prior_map(self):
        if self._prior_cache is None:
            pts, _ = self.world.sample_surface_points()
            self._prior_cache = voxel_downsample(pts, 0.25)
        return self._prior_cache

    def _integrate_scan(self) -> None:
        z = float(self.world.ground_height(self.truth.x, self.truth.y))
        scan = simulate_lidar(
            self.world,
            (self.truth.x, self.truth.y, z + self.config.sensor_height),
            self.pattern,
            yaw=self.truth.theta1,
            rng=self.rng_scan,
            oracle_noise=self.config.label_noise,
        )
        if not len(scan.points):
            return
        pts_odom = self._world_to_odom(scan.points)
        origin = np.array([self.est[0], self.est[1], z + self.config.sensor_height])
        self.vmap.integrate_scan(origin, pts_odom, scan.trav_logits)
        if self.tick_index % self.config.decay_every == 0:
            self.vmap.decay_dynamic()

    def _approach_waypoint(self) -> np.ndarray:
        """Waypoint on the vehicle-to-tree line at the grasp distance."""
        tree = self.tree_rel_est
        d = tree - self.est[:2]
        dist = max(float(np.hypot(*d)), 1e-6)
        return tree - d / dist * self.config.approach_fraction * self.grasp.reach_max

    def _drive(self, target, dt: float) -> None:
        est_state = self._est_state()
        cmd = track(est_state, tuple(target), self.gains, self.params)
        self._advance(cmd.v, cmd.gamma_dot, dt)
        self._last_cmd_v = cmd.v

    def _advance(self, v: float, gamma_dot: float, dt: float) -> None:
        self.truth = step_vehicle(self.truth, (v, gamma_dot), dt, self.params)
        pose = self._truth_pose()
        self.est = self.odometry.update(pose)
        step = math.hypot(self.truth.x - self._trail_states[-1].x,
                          self.truth.y - self._trail_states[-1].y)
        self.metrics.distance_driven += step
        if step > 0.0:
            self._trail_states.append(self.truth)
            self._trail_arc.append(self._trail_arc[-1] + step)
        self._check_collisions()

    def _check_collisions(self) -> None:
        centers = disc_centers(
            np.array([[self.truth.x, self.truth.y, self.truth.theta1,
                       self.truth.gamma]]), self.params)[0]
        radii = self.library.model.radii
        alive = self.world.alive_trees()
        alive = alive[alive != self.target_tree]  # grasp target is approached
        tree_xy = self.world.tree_pos[alive]
        stem_r = self.world.stem_radius[alive]
        hit = False
        for (cx, cy), r in zip(centers, radii):
            if len(tree_xy):
                d = np.hypot(tree_xy[:, 0] - cx, tree_xy[:, 1] - cy)
                if np.any(d < stem_r + r):
                    hit = True
            for h in self.world.humans:
                if math.hypot(h.position[0] - cx, h.position[1] - cy) < h.radius + r:
                    hit = True
        if hit:
            self.metrics.collisions += 1
            self._log("collision", pose=[round(float(x), 3) for x in self._truth_pose()])

    def _reposition(self) -> None:
        """Back the machine a few meters along its incoming trail."""
        back = float(self.rng_misc.uniform(self.config.reposition_min,
                                           self.config.reposition_max))
        target_arc = max(self._trail_arc[-1] - back, 0.0)
        idx = int(np.searchsorted(self._trail_arc, target_arc))
        idx = min(idx, len(self._trail_states) - 1)
        # Replay the rewind through the drifting odometry so the error state
        # keeps evolving during the manual leg.
        for state in reversed(self._trail_states[idx:]):
            self.est = self.odometry.update(
                np.array([state.x, state.y, state.theta1]))
        self.truth = self._trail_states[idx]
        del self._trail_states[idx + 1:]
        del self._trail_arc[idx + 1:]
        self.metrics.interventions += 1
        self._log("reposition", distance=round(back, 3))
        self._transition(Phase.APPROACHING)

    def _attempt_grasp(self) -> None:
        self.metrics.grasp_attempts += 1
        rel = self.tree_rel_est - self.est[:2]
        ce, se = math.cos(-self.est[2]), math.sin(-self.est[2])
        rel_body = np.array([ce * rel[0] - se * rel[1], se * rel[0] + ce * rel[1]])
        ang = self.rng_arm.uniform(0.0, 2 * math.pi)
        mag = self.grasp.arm_error * math.sqrt(self.rng_arm.uniform(0.0, 1.0))
        sample = np.array([mag * math.cos(ang), mag * math.sin(ang)])
        ok, offset = grasp_check(self._truth_pose(), rel_body,
                                 self.world.tree_pos[self.target_tree],
                                 self.grasp, sample)
        self._log("grasp", success=ok, offset=round(offset, 4),
                  attempt=self.metrics.grasp_attempts)
        if ok:
            self._transition(Phase.AWAIT_CONFIRM)
        else:
            self._grasp_failures += 1
            if self._grasp_failures > self.config.retry_limit:
                self._transition(Phase.BLOCKED)
                self._log("blocked", reason="grasp retry limit exceeded")
                self._finish("retry_limit", success=False)
                return
            self._transition(Phase.INTERVENTION)
            if self.config.auto_retry:
                self._reposition()

    # Tick -------------------------------------------------------------------

    def tick(self) -> None:
        if self.done:
            return
        self.tick_index += 1
        self.t += self.config.tick_dt
        self._phase_time[self.phase.value] += self.config.tick_dt
        for cmd in self._tick_hooks.pop(self.tick_index, []):
            self.submit(dict(cmd))
        step_dynamics(self.world, self.config.tick_dt)
        self._process_commands()

        if self.phase is Phase.LOCALIZING:
            try:
                self._localize()
                self._transition(Phase.NAVIGATING)
            except LocalizationRejected as e:
                self._log("blocked", reason=f"localization rejected: {e}")
                self._transition(Phase.BLOCKED)
                self._finish("localization_rejected", success=False)
            return

        driving = self.phase in (Phase.NAVIGATING, Phase.APPROACHING,
                                 Phase.RETURNING, Phase.INTERVENTION)
        if driving:
            self._integrate_scan()

        sub_dt = self.config.tick_dt / self.config.substeps
        if self.phase is Phase.INTERVENTION and self._override_cmd is not None:
            for _ in range(self.config.substeps):
                self._advance(*self._override_cmd, sub_dt)
        elif self.phase in (Phase.NAVIGATING, Phase.RETURNING):
            goal = (self._approach_waypoint() if self.phase is Phase.NAVIGATING
                    else np.asarray(self.world.spawn, dtype=float))
            dist_goal = float(np.hypot(*(goal - self.est[:2])))
            if self.phase is Phase.NAVIGATING and dist_goal < self.config.approach_switch:
                self._transition(Phase.APPROACHING)
            elif self.phase is Phase.RETURNING and dist_goal < 3.0:
                self._finish("complete", success=self.metrics.cut_done)
                return
            else:
                try:
                    plan = plan_step(
                        self.library, self.vmap, self._est_state(), goal,
                        self.weights, self.config.window,
                        self.config.lookahead_arc, self._last_gamma_dot,
                    )
                    self._last_plan = plan
                    # Steering-trend hysteresis: the proximity cost compares
                    # against the previously committed group's steering.
                    self._last_gamma_dot = plan.segment_gamma_dot
                    self._blocked_since = None
                    self._log("plan", group=plan.selected_group,
                              feasible=plan.feasible_count,
                              lookahead=[round(float(v), 3) for v in plan.lookahead_point],
                              cost=round(plan.group_cost, 4))
                    for _ in range(self.config.substeps):
                        self._drive(plan.lookahead_point, sub_dt)
                except NoFeasiblePrimitive:
                    if self._blocked_since is None:
                        self._blocked_since = self.t
                    self._log("plan_blocked", waited=round(self.t - self._blocked_since, 2))
                    if self.t - self._blocked_since > self.config.blocked_timeout:
                        self._transition(Phase.BLOCKED)
                        self._log("blocked", reason="no feasible primitive")
                        self._finish("blocked", success=False)
                        return
            if (self.phase is Phase.RETURNING and self._return_started is not None
                    and self.t - self._return_started > self.config.return_timeout):
                self._finish("return_timeout", success=self.metrics.cut_done)
                return
        elif self.phase is Phase.APPROACHING:
            waypoint = self._approach_waypoint()
            r = float(np.hypot(*(waypoint - self.est[:2])))
            if r < self.config.approach_stop:
                self._log("arrived", waypoint=[round(float(v), 3) for v in waypoint])
                self._attempt_grasp()
            else:
                for _ in range(self.config.substeps):
                    self._drive(waypoint, sub_dt)
                    if float(np.hypot(*(waypoint - self.est[:2]))) < self.config.approach_stop:
                        break
        elif self.phase is Phase.CUTTING:
            if self._cut_until is not None and self.t >= self._cut_until:
                self.world.remove_tree(self.target_tree)
                self.metrics.cut_done = True
                self._log("cut", tree=self.target_tree)
                self._return_started = self.t
                self._transition(Phase.RETURNING)

        self._log("pose",
                  truth=[round(float(v), 5) for v in self._truth_pose()],
                  est=[round(float(v), 5) for v in self.est],
                  gamma=round(self.truth.gamma, 5),
                  v=round(self._last_cmd_v, 4),
                  phase=self.phase.value)
        if self.t >= self.config.max_time:
            self._finish("timeout", success=False)

    def run(self, script: list | None = None) -> MissionMetrics:
        if script:
            self.schedule(script)
        while not self.done:
            self.tick()
        self.metrics = compute_metrics(self.events, base=self.metrics)
        self._log("metrics", **self.metrics.as_dict())
        return self.metrics

    # Telemetry ------------------------------------------------------------

    def snapshot(self) -> dict:
        """Versioned state message for the operator console."""
        cells = []
        if self.tick_index % 5 == 0 or self._last_snapshot_cells is None:
            half = self.config.window / 2
            lo = (self.est[0] - half, self.est[1] - half, -3.0)
            hi = (self.est[0] + half, self.est[1] + half, 4.0)
            centers, p_trav = self.vmap.query_occupied(lo, hi)
            cs = self.library.config.cell_size
            if len(centers):
                cols = np.floor(centers[:, :2] / cs).astype(int)
                order = np.lexsort((p_trav, cols[:, 1], cols[:, 0]))
                cols, pt = cols[order], p_trav[order]
                first = np.concatenate([[True], np.any(cols[1:] != cols[:-1], axis=1)])
                cells = [[int(i), int(j), round(float(p), 3)]
                         for (i, j), p in zip(cols[first], pt[first])]
            self._last_snapshot_cells = cells
        else:
            cells = self._last_snapshot_cells
        plan = self._last_plan
        return {
            "v": 1,
            "type": "telemetry",
            "tick": self.tick_index,
            "t": round(self.t, 3),
            "phase": self.phase.value,
            "pose": [round(float(x), 4) for x in self.est],
            "truth": [round(float(x), 4) for x in self._truth_pose()],
            "gamma": round(self.truth.gamma, 4),
            "speed": round(self._last_cmd_v, 3),
            "target": ([round(float(x), 3) for x in self.tree_rel_est]
                       if self.tree_rel_est is not None else None),
            "plan": None if plan is None else {
                "group": plan.selected_group,
                "feasible": plan.feasible_count,
                "lookahead": [round(float(x), 3) for x in plan.lookahead_point],
            },
            "map": {"cell_size": self.library.config.cell_size, "cells": cells},
            "metrics": self.metrics.as_dict(),
            "done": self.done,
        }

    _last_snapshot_cells = None


def compute_metrics(events: list, base: MissionMetrics | None = None) -> MissionMetrics:
    """Recompute mission metrics purely from an event log."""
    m = MissionMetrics() if base is None else base
    dist = 0.0
    prev = None
    active = 0.0
    intervention_time = 0.0
    interventions = 0
    grasps = 0
    collisions = 0
    cut = False
    tick_dt = None
    last_t = 0.0
    prev_t = None
    for ev in events:
        if ev["type"] == "pose":
            if prev is not None:
                dist += math.hypot(ev["truth"][0] - prev[0], ev["truth"][1] - prev[1])
            if prev_t is not None and ev["phase"] not in (Phase.IDLE.value,
                                                          Phase.AWAIT_CONFIRM.value):
                active += ev["t"] - prev_t
                if ev["phase"] == Phase.INTERVENTION.value:
                    intervention_time += ev["t"] - prev_t
            prev = ev["truth"]
            prev_t = ev["t"]
        elif ev["type"] == "reposition":
            interventions += 1
        elif ev["type"] == "command" and ev.get("name") == "manual_override":
            interventions += 1
        elif ev["type"] == "grasp":
            grasps += 1
        elif ev["type"] == "collision":
            collisions += 1
        elif ev["type"] == "cut":
            cut = True
        last_t = ev["t"]
    m.distance_driven = dist
    m.active_time = active
    m.avg_speed = dist / active if active > 0 else 0.0
    m.interventions = interventions
    m.intervention_interval = active / interventions if interventions else None
    m.intervention_time_fraction = intervention_time / active if active > 0 else 0.0
    m.grasp_attempts = grasps
    m.collisions = collisions
    m.cut_done = cut
    if m.result == "incomplete" and cut:
        m.result = "complete"
    m.success = cut and collisions == 0
    return m


def parse_script(text: str) -> list:
    """Command schedule lines: `at <tick> <name> [json-args]` or
    `on <Phase> <name> [json-args]`."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split(None, 2)
        if len(parts) < 3:
            raise ValueError(f"script line {lineno}: expected 'at|on <when> <command>'")
        mode, when, rest = parts
        rest_parts = rest.split(None, 1)
        name = rest_parts[0]
        args = json.loads(rest_parts[1]) if len(rest_parts) > 1 else {}
        cmd = {"v": 1, "type": "command", "name": name, "args": args}
        if mode == "at":
            out.append(("tick", int(when), cmd))
        elif mode == "on":
            out.append(("phase", when, cmd))
        else:
            raise ValueError(f"script line {lineno}: unknown trigger {mode!r}")
    return out


def save_events(events: list, path) -> None:
    with open(path, "w") as f:
        for ev in events:
            f.write(json.dumps(ev, sort_keys=True) + "\n")


def load_events(path) -> list:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out

"""Receding-horizon local planner over the primitive library.

Each planning tick projects the voxel map into a local 2D obstacle grid,
culls every trajectory whose swept footprint touches an occupied cell,
scores the survivors with normalized heuristic terms, and hands back a
lookahead point on the best root group's shared segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import NoFeasiblePrimitive
from .kinematics import VehicleState, wrap_angle
from .primitives import PrimitiveLibrary, TrajectoryTree, pack_cells, rasterize_discs
from .voxelmap import TraversabilityMap

TRAVERSABLE_P = 0.8   # voxels above this traversability are drivable
OCCUPIED_P = 0.5      # occupancy belief threshold


@dataclass(frozen=True)
class CostWeights:
    progress: float = 0.5
    heading: float = 0.15
    steer_proximity: float = 0.1
    speed: float = 0.05
    height: float = 0.1
    smooth: float = 0.1
    unknown: float = 0.05
    v_nominal: float = 1.0       # m/s target cruise speed
    height_scale: float = 1.0    # m mapped to a unit height term

    def __post_init__(self):
        terms = (self.progress, self.heading, self.steer_proximity,
                 self.speed, self.height, self.smooth, self.unknown)
        if any(w < 0 for w in terms):
            raise ValueError("weights must be non-negative")
        if not any(w > 0 for w in terms):
            raise ValueError("at least one weight must be positive")

    @classmethod
    def from_dict(cls, cfg: dict, prefix: str = "weights.") -> "CostWeights":
        d = cls()
        g = lambda k, dv: float(cfg.get(prefix + k, dv))
        return cls(
            progress=g("progress", d.progress),
            heading=g("heading", d.heading),
            steer_proximity=g("steer_proximity", d.steer_proximity),
            speed=g("speed", d.speed),
            height=g("height", d.height),
            smooth=g("smooth", d.smooth),
            unknown=g("unknown", d.unknown),
            v_nominal=g("v_nominal", d.v_nominal),
        )


@dataclass
class ObstacleGrid:
    """Local 2D projection of the voxel map around a vehicle pose."""

    origin: np.ndarray          # (2,) world corner of cell (0, 0)
    cell_size: float
    occupied: np.ndarray        # (nx, ny) bool
    known: np.ndarray           # (nx, ny) bool, column has any stored voxel
    height: np.ndarray          # (nx, ny) terrain height, filled where unknown
    vehicle_pose: np.ndarray    # (3,) x, y, theta the window was built around

    @property
    def shape(self):
        return self.occupied.shape

    def occupied_cell_centers(self) -> np.ndarray:
        idx = np.argwhere(self.occupied)
        return self.origin + (idx + 0.5) * self.cell_size

    def cell_rect(self, ix: int, iy: int):
        lo = self.origin + np.array([ix, iy]) * self.cell_size
        return lo, lo + self.cell_size


def build_obstacle_grid(
    vmap: TraversabilityMap,
    vehicle_pose,
    window: float = 30.0,
    cell_size: float = 0.25,
    z_band: tuple[float, float] = (-2.0, 2.0),
    vehicle_z: float = 0.0,
    min_evidence: int = 5,
) -> ObstacleGrid:
    """Project the voxel map onto a vehicle-centered planning window.

    A column is occupied when it holds a blocking voxel (occupancy belief
    above 0.5, traversability at or below 0.8) inside the height band; the
    band top sits at the machine height so overhanging canopy does not
    block. A blocking voxel must have accumulated at least `min_evidence`
    scan updates: younger cells stay unknown (they carry the unknown-cost
    term instead), so single noisy labels at the frontier do not wall off
    the world. Terrain height per column is the lowest drivable voxel top,
    filled from the nearest known column where the map is silent; an empty
    window leaves every cell unknown and culling lets the vehicle move.
    """
    pose = np.asarray(vehicle_pose, dtype=float)
    half = window / 2.0
    origin = pose[:2] - half
    n = int(round(window / cell_size))
    occupied = np.zeros((n, n), dtype=bool)
    known = np.zeros((n, n), dtype=bool)
    height = np.full((n, n), np.nan)

    lo = (origin[0], origin[1], vehicle_z + z_band[0])
    hi = (origin[0] + window, origin[1] + window, vehicle_z + z_band[1])
    centers, p_occ, p_trav, obs = vmap.query_region(lo, hi, with_obs=True)
    if len(centers):
        idx = np.floor((centers[:, :2] - origin) / cell_size).astype(int)
        ok = (idx[:, 0] >= 0) & (idx[:, 0] < n) & (idx[:, 1] >= 0) & (idx[:, 1] < n)
        idx, centers = idx[ok], centers[ok]
        p_occ, p_trav, obs = p_occ[ok], p_trav[ok], obs[ok]
        known[idx[:, 0], idx[:, 1]] = True
        blocking = (p_occ > OCCUPIED_P) & (p_trav <= TRAVERSABLE_P) & (obs >= min_evidence)
        occupied[idx[blocking, 0], idx[blocking, 1]] = True
        drivable = (p_occ > OCCUPIED_P) & (p_trav > TRAVERSABLE_P)
        if drivable.any():
            tops = centers[drivable, 2] + vmap.config.voxel_size / 2.0
            cols = idx[drivable]
            order = np.lexsort((tops, cols[:, 1], cols[:, 0]))
            cols, tops = cols[order], tops[order]
            first = np.concatenate([[True], np.any(cols[1:] != cols[:-1], axis=1)])
            height[cols[first, 0], cols[first, 1]] = tops[first]

    has = np.isfinite(height)
    if has.any():
        # Nearest-known fill for silent columns.
        _, (fi, fj) = ndimage.distance_transform_edt(~has, return_indices=True)
        height = height[fi, fj]
    else:
        height = np.zeros((n, n))
    return ObstacleGrid(
        origin=origin, cell_size=cell_size, occupied=occupied,
        known=known, height=height, vehicle_pose=pose,
    )


def _world_cells_in_vehicle_frame(grid: ObstacleGrid) -> np.ndarray:
    """Conservative vehicle-frame cell cover of every occupied world cell."""
    centers = grid.occupied_cell_centers()
    if not len(centers):
        return np.empty(0, dtype=np.int64)
    pose = grid.vehicle_pose
    c, s = math.cos(-pose[2]), math.sin(-pose[2])
    rel = centers - pose[:2]
    local = np.stack([c * rel[:, 0] - s * rel[:, 1], s * rel[:, 0] + c * rel[:, 1]], 1)
    # A rotated cell square fits in a disc of half-diagonal radius.
    cover, _ = rasterize_discs(local, grid.cell_size * 0.7072, grid.cell_size)
    return np.unique(pack_cells(cover))


def _segment_hits(tree: TrajectoryTree, obstacle_keys: np.ndarray) -> np.ndarray:
    """Per-segment flag: does the segment's swept footprint touch an obstacle."""
    n_segs = len(tree.seg_parent)
    if not len(obstacle_keys) or not len(tree.cells):
        return np.zeros(n_segs, dtype=bool)
    keys = pack_cells(tree.cells)
    hit = np.isin(keys, obstacle_keys, assume_unique=False)
    bounds = np.concatenate([tree.seg_cell_start, [len(keys)]]).astype(int)
    out = np.zeros(n_segs, dtype=bool)
    for sidx in range(n_segs):
        lo, hi = bounds[sidx], bounds[sidx] + int(tree.seg_cell_count[sidx])
        if hi > lo:
            out[sidx] = hit[lo:hi].any()
    return out


def _leaf_chain_ids(tree: TrajectoryTree):
    leaves = tree.leaf_ids
    mids = tree.seg_parent[leaves]
    roots = tree.seg_parent[mids]
    return leaves, mids, roots


def filter_colliding(lib: PrimitiveLibrary, gamma_now: float, grid: ObstacleGrid):
    """Feasible leaf indices of the nearest-angle tree (whole-trajectory cull).

    Returns (tree_index, feasible leaf positions). Raises
    NoFeasiblePrimitive when every trajectory's footprint is touched.
    """
    tree_idx = lib.nearest_tree(gamma_now)
    tree = lib.trees[tree_idx]
    obstacle_keys = _world_cells_in_vehicle_frame(grid)
    seg_hit = _segment_hits(tree, obstacle_keys)
    leaves, mids, roots = _leaf_chain_ids(tree)
    blocked = seg_hit[leaves] | seg_hit[mids] | seg_hit[roots]
    feasible = np.flatnonzero(~blocked)
    if len(feasible) == 0:
        raise NoFeasiblePrimitive(
            f"all {len(leaves)} trajectories of tree {tree_idx} are blocked"
        )
    return tree_idx, feasible


def _transform_poses(poses: np.ndarray, pose) -> np.ndarray:
    """Vehicle-frame (x, y, theta, gamma) rows into the world frame."""
    c, s = math.cos(pose[2]), math.sin(pose[2])
    out = poses.copy()
    out[:, 0] = pose[0] + c * poses[:, 0] - s * poses[:, 1]
    out[:, 1] = pose[1] + s * poses[:, 0] + c * poses[:, 1]
    out[:, 2] = poses[:, 2] + pose[2]
    return out


def score(
    lib: PrimitiveLibrary,
    tree_idx: int,
    feasible: np.ndarray,
    goal,
    state: VehicleState,
    grid: ObstacleGrid,
    weights: CostWeights = CostWeights(),
    current_gamma_dot: float = 0.0,
):
    """Normalized per-trajectory cost for the feasible leaves.

    Returns (costs (F,), diagnostics dict of per-term (F,) arrays).
    """
    tree = lib.trees[tree_idx]
    params = lib.params
    pose = np.array([state.x, state.y, state.theta1])
    goal = np.asarray(goal, dtype=float)
    leaves, mids, roots = _leaf_chain_ids(tree)
    leaves, mids, roots = leaves[feasible], mids[feasible], roots[feasible]

    term_rows = (tree.seg_pose_start[leaves] + tree.seg_pose_count[leaves] - 1).astype(int)
    term_local = tree.poses[term_rows]
    term_world = _transform_poses(term_local, pose)

    d_now = max(np.linalg.norm(goal - pose[:2]), 1e-6)
    horizon = lib.config.horizon_numerator
    # Remaining distance if the vehicle stopped at the trajectory's closest
    # pose to the goal. Scoring the fixed-length terminal instead makes
    # curling trajectories optimal once the goal is inside the horizon.
    d_term = _closest_goal_distance(tree, pose, goal, leaves, mids, roots)
    progress = np.clip(d_term / (d_now + horizon), 0.0, 1.0)

    bearing = np.arctan2(goal[1] - term_world[:, 1], goal[0] - term_world[:, 0])
    at_goal = d_term < 1e-9  # bearing undefined on top of the goal
    mis1 = np.where(at_goal, 0.0, np.abs(wrap_angle_arr(term_world[:, 2] - bearing)))
    mis2 = np.where(
        at_goal, 0.0,
        np.abs(wrap_angle_arr(term_world[:, 2] - term_world[:, 3] - bearing)),
    )
    heading = (mis1 + mis2) / (2.0 * math.pi)

    steer = np.abs(tree.seg_gamma_dot[roots] - current_gamma_dot) / (2 * params.gamma_rate_max)
    steer = np.clip(steer, 0.0, 1.0)
    speed = np.abs(tree.seg_v[roots] - weights.v_nominal) / params.v_max

    h_spread, unknown_frac = _terrain_stats(tree, grid, leaves, mids, roots)
    height = np.clip(h_spread / weights.height_scale, 0.0, 1.0)

    smooth = (
        np.abs(tree.seg_gamma_dot[mids] - tree.seg_gamma_dot[roots])
        + np.abs(tree.seg_gamma_dot[leaves] - tree.seg_gamma_dot[mids])
    ) / (4.0 * params.gamma_rate_max)

    costs = (
        weights.progress * progress
        + weights.heading * heading
        + weights.steer_proximity * steer
        + weights.speed * speed
        + weights.height * height
        + weights.smooth * smooth
        + weights.unknown * unknown_frac
    )
    diag = {
        "progress": progress, "heading": heading, "steer_proximity": steer,
        "speed": speed, "height": height, "smooth": smooth, "unknown": unknown_frac,
    }
    return costs, diag


def wrap_angle_arr(a):
    return (np.asarray(a) + math.pi) % (2 * math.pi) - math.pi


def _closest_goal_distance(tree: TrajectoryTree, pose, goal, leaves, mids, roots):
    """Per-leaf minimum distance from the goal to the trajectory's poses."""
    c, s = math.cos(pose[2]), math.sin(pose[2])
    local = tree.poses[:, :2]
    wx = pose[0] + c * local[:, 0] - s * local[:, 1]
    wy = pose[1] + s * local[:, 0] + c * local[:, 1]
    d = np.hypot(wx - goal[0], wy - goal[1])
    n_segs = len(tree.seg_parent)
    starts = tree.seg_pose_start.astype(int)
    counts = tree.seg_pose_count.astype(int)
    seg_min = np.array([
        d[starts[k]: starts[k] + counts[k]].min() if counts[k] else np.inf
        for k in range(n_segs)
    ])
    return np.minimum.reduce([seg_min[roots], seg_min[mids], seg_min[leaves]])


def _terrain_stats(tree: TrajectoryTree, grid: ObstacleGrid, leaves, mids, roots):
    """Per-leaf terrain height spread and unknown-cell fraction over the
    swept footprint, computed segment-wise and combined along each chain."""
    pose = grid.vehicle_pose
    c, s = math.cos(pose[2]), math.sin(pose[2])
    cell_centers = (tree.cells.astype(float) + 0.5) * grid.cell_size
    wx = pose[0] + c * cell_centers[:, 0] - s * cell_centers[:, 1]
    wy = pose[1] + s * cell_centers[:, 0] + c * cell_centers[:, 1]
    gi = np.floor((wx - grid.origin[0]) / grid.cell_size).astype(int)
    gj = np.floor((wy - grid.origin[1]) / grid.cell_size).astype(int)
    nx, ny = grid.shape
    inside = (gi >= 0) & (gi < nx) & (gj >= 0) & (gj < ny)
    gi_c = np.clip(gi, 0, nx - 1)
    gj_c = np.clip(gj, 0, ny - 1)
    h = np.where(inside, grid.height[gi_c, gj_c], np.nan)
    unknown = np.where(inside, ~grid.known[gi_c, gj_c], True)

    n_segs = len(tree.seg_parent)
    starts = tree.seg_cell_start.astype(int)
    counts = tree.seg_cell_count.astype(int)
    seg_hmin = np.full(n_segs, np.inf)
    seg_hmax = np.full(n_segs, -np.inf)
    seg_unknown = np.zeros(n_segs)
    seg_total = np.maximum(counts, 1)
    for sidx in range(n_segs):
        lo, hi = starts[sidx], starts[sidx] + counts[sidx]
        if hi > lo:
            hh = h[lo:hi]
            finite = np.isfinite(hh)
            if finite.any():
                seg_hmin[sidx] = np.min(hh[finite])
                seg_hmax[sidx] = np.max(hh[finite])
            seg_unknown[sidx] = np.sum(unknown[lo:hi])

    hmin = np.minimum.reduce([seg_hmin[roots], seg_hmin[mids], seg_hmin[leaves]])
    hmax = np.maximum.reduce([seg_hmax[roots], seg_hmax[mids], seg_hmax[leaves]])
    spread = np.where(np.isfinite(hmin) & np.isfinite(hmax), hmax - hmin, 0.0)
    unk = (seg_unknown[roots] + seg_unknown[mids] + seg_unknown[leaves]) / (
        seg_total[roots] + seg_total[mids] + seg_total[leaves]
    )
    return spread, unk


@dataclass
class PlanResult:
    tree_index: int
    selected_group: int               # root segment id within the tree
    lookahead_point: np.ndarray       # (2,) world frame
    segment_v: float
    segment_gamma_dot: float
    feasible_count: int
    group_cost: float
    diagnostics: dict = field(default_factory=dict)


def plan_step(
    lib: PrimitiveLibrary,
    vmap: TraversabilityMap,
    state: VehicleState,
    goal,
    weights: CostWeights = CostWeights(),
    window: float = 30.0,
    lookahead_arc: float = 2.0,
    current_gamma_dot: float = 0.0,
    grid: ObstacleGrid | None = None,
) -> PlanResult:
    """One receding-horizon tick: cull, score, pick the cheapest root group,
    and emit the lookahead pose on its shared segment."""
    if grid is None:
        grid = build_obstacle_grid(
            vmap, (state.x, state.y, state.theta1), window, lib.config.cell_size
        )
    tree_idx, feasible = filter_colliding(lib, state.gamma, grid)
    tree = lib.trees[tree_idx]
    costs, diag = score(lib, tree_idx, feasible, goal, state, grid, weights,
                        current_gamma_dot)

    _, _, roots = _leaf_chain_ids(tree)
    roots = roots[feasible]
    order = np.argsort(roots, kind="stable")
    sorted_roots = roots[order]
    sorted_costs = costs[order]
    uniq, starts = np.unique(sorted_roots, return_index=True)
    sums = np.add.reduceat(sorted_costs, starts)
    ns = np.diff(np.append(starts, len(sorted_costs)))
    means = sums / ns
    best = int(np.argmin(means))          # ties: lowest group id wins
    best_root = int(uniq[best])

    pose_lo = int(tree.seg_pose_start[best_root])
    n_poses = int(tree.seg_pose_count[best_root])
    arc_idx = min(n_poses - 1, int(round(lookahead_arc / lib.config.pose_spacing)))
    look_local = tree.poses[pose_lo + arc_idx]
    look_world = _transform_poses(look_local[None, :], (state.x, state.y, state.theta1))[0]

    return PlanResult(
        tree_index=tree_idx,
        selected_group=best_root,
        lookahead_point=look_world[:2],
        segment_v=float(tree.seg_v[best_root]),
        segment_gamma_dot=float(tree.seg_gamma_dot[best_root]),
        feasible_count=int(len(feasible)),
        group_cost=float(means[best]),
        diagnostics={
            "group_means": dict(zip(uniq.tolist(), means.tolist())),
            "terms": {k: float(np.mean(v)) for k, v in diag.items()},
        },
    )

"""Offline motion-primitive library.

Trajectory trees are grown per initial articulation angle by forward
simulation in the vehicle frame: a menu of root control pairs, each
splitting twice into freshly sampled steering commands while the speed is
held, out to a fixed travel distance. Poses are sampled at a fixed arc
spacing and each tree segment carries the grid-cell union swept by the
vehicle's three-disc collision model, so the online planner can cull by
set intersection.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CorruptFile, InfeasibleConfig, VersionMismatch
from .kinematics import VehicleParams, step_states_array

FORMAT_MAGIC = b"FNPRIM01"
FORMAT_VERSION = 1

# Fractions of gamma_rate_max explored by root steering, slowest speed first.
ROOT_STEER_SPANS = (1.0, 0.75, 0.5, 0.35)


@dataclass(frozen=True)
class SphereModel:
    """Three-disc planar collision model: front axle, joint, rear axle."""

    r_front: float = 1.1
    r_joint: float = 1.0
    r_rear: float = 1.1

    def __post_init__(self):
        if min(self.r_front, self.r_joint, self.r_rear) <= 0.0:
            raise ValueError("sphere radii must be positive")

    @property
    def radii(self) -> tuple[float, float, float]:
        return (self.r_front, self.r_joint, self.r_rear)


def disc_centers(poses: np.ndarray, params: VehicleParams) -> np.ndarray:
    """(N, 3, 2) disc centers for (N, 4) poses (x, y, theta1, gamma)."""
    poses = np.atleast_2d(poses)
    x, y, th, ga = poses[:, 0], poses[:, 1], poses[:, 2], poses[:, 3]
    jx = x - params.l1 * np.cos(th)
    jy = y - params.l1 * np.sin(th)
    th2 = th - ga
    rx = jx - params.l2 * np.cos(th2)
    ry = jy - params.l2 * np.sin(th2)
    return np.stack(
        [np.stack([x, y], 1), np.stack([jx, jy], 1), np.stack([rx, ry], 1)], axis=1
    )


@dataclass(frozen=True)
class PrimitiveConfig:
    """Library generation settings; defaults reproduce the standard counts."""

    n_initial_angles: int = 30
    n_control_pairs: int = 15
    split_numerators: tuple[float, float] = (3.0, 6.0)  # split at t = num / v
    horizon_numerator: float = 10.0                     # horizon T = 10 / v
    split_branching: tuple[int, int] = (6, 5)
    sample_dt: float = 0.02                             # s, integration step
    pose_spacing: float = 0.25                          # m of arc between poses
    cell_size: float = 0.25                             # m, footprint raster
    speeds: tuple[float, ...] = (0.3, 0.6, 1.0, 1.4)    # root speed menu
    seed: int = 0

    def __post_init__(self):
        if self.n_initial_angles < 1 or self.n_control_pairs < 1:
            raise InfeasibleConfig("counts must be at least 1")
        if any(b < 1 for b in self.split_branching):
            raise InfeasibleConfig("split branching must be at least 1")
        if not 0 < self.split_numerators[0] < self.split_numerators[1] < self.horizon_numerator:
            raise InfeasibleConfig("splits must be ordered within the horizon")
        if self.sample_dt <= 0 or self.pose_spacing <= 0 or self.cell_size <= 0:
            raise InfeasibleConfig("step sizes must be positive")
        if not self.speeds or any(v <= 0 for v in self.speeds):
            raise InfeasibleConfig("speed menu must be positive")

    @property
    def leaves_per_angle(self) -> int:
        return self.n_control_pairs * self.split_branching[0] * self.split_branching[1]

    @classmethod
    def from_dict(cls, cfg: dict, prefix: str = "primitives.") -> "PrimitiveConfig":
        g = lambda k, d: cfg.get(prefix + k, d)
        d = cls()
        return cls(
            n_initial_angles=int(g("n_initial_angles", d.n_initial_angles)),
            n_control_pairs=int(g("n_control_pairs", d.n_control_pairs)),
            split_branching=(
                int(g("split_branch_1", d.split_branching[0])),
                int(g("split_branch_2", d.split_branching[1])),
            ),
            sample_dt=float(g("sample_dt", d.sample_dt)),
            pose_spacing=float(g("pose_spacing", d.pose_spacing)),
            cell_size=float(g("cell_size", d.cell_size)),
            seed=int(g("seed", d.seed)),
        )


@dataclass(frozen=True)
class MotionPrimitive:
    """One leaf trajectory: its control schedule and sampled poses."""

    initial_gamma: float
    control_segments: tuple  # ((v, gamma_dot), duration) per segment
    sampled_poses: np.ndarray  # (n, 4): x, y, theta1, gamma in vehicle frame

    @property
    def terminal_pose(self) -> np.ndarray:
        return self.sampled_poses[-1]


@dataclass
class CollisionFootprint:
    """Grid cells covered by the three discs at every sampled pose."""

    cell_size: float
    per_pose_cells: list  # list of (m, 2) int arrays

    def union(self) -> np.ndarray:
        if not self.per_pose_cells:
            return np.empty((0, 2), dtype=np.int32)
        return np.unique(np.vstack(self.per_pose_cells), axis=0)


@dataclass
class TrajectoryTree:
    """Segment table of one initial angle's trajectory tree.

    Segments are stored level-major (roots, mids, tails); each leaf is a
    tail segment and its trajectory is the root-mid-tail chain of poses.
    """

    initial_gamma: float
    seg_parent: np.ndarray      # (S,) int32, -1 for roots
    seg_level: np.ndarray       # (S,) int8
    seg_v: np.ndarray           # (S,) float64
    seg_gamma_dot: np.ndarray   # (S,) float64
    seg_duration: np.ndarray    # (S,) float64
    seg_pose_start: np.ndarray  # (S,) int64 offsets into poses
    seg_pose_count: np.ndarray  # (S,) int64
    poses: np.ndarray           # (P, 4) float64
    seg_cell_start: np.ndarray  # (S,) int64 offsets into cells
    seg_cell_count: np.ndarray  # (S,) int64
    cells: np.ndarray           # (C, 2) int16 footprint cells per segment

    @property
    def leaf_ids(self) -> np.ndarray:
        return np.flatnonzero(self.seg_level == 2)

    def chain(self, leaf_seg: int) -> list[int]:
        """Segment ids from root to the given leaf."""
        out = [int(leaf_seg)]
        while self.seg_parent[out[0]] >= 0:
            out.insert(0, int(self.seg_parent[out[0]]))
        return out

    def leaf_poses(self, leaf_seg: int) -> np.ndarray:
        parts = [
            self.poses[self.seg_pose_start[s]: self.seg_pose_start[s] + self.seg_pose_count[s]]
            for s in self.chain(leaf_seg)
        ]
        return np.vstack(parts)

    def leaf_cells(self, leaf_seg: int) -> np.ndarray:
        parts = [
            self.cells[self.seg_cell_start[s]: self.seg_cell_start[s] + self.seg_cell_count[s]]
            for s in self.chain(leaf_seg)
        ]
        return np.unique(np.vstack(parts), axis=0)


@dataclass
class PrimitiveLibrary:
    """All trajectory trees plus the settings that produced them."""

    config: PrimitiveConfig
    params: VehicleParams
    model: SphereModel
    initial_gammas: np.ndarray
    trees: list

    @property
    def version(self) -> int:
        return FORMAT_VERSION

    def nearest_tree(self, gamma: float) -> int:
        return int(np.argmin(np.abs(self.initial_gammas - gamma)))

    def primitive(self, tree_idx: int, leaf_idx: int) -> MotionPrimitive:
        tree = self.trees[tree_idx]
        leaf_seg = int(tree.leaf_ids[leaf_idx])
        segs = tree.chain(leaf_seg)
        controls = tuple(
            ((float(tree.seg_v[s]), float(tree.seg_gamma_dot[s])), float(tree.seg_duration[s]))
            for s in segs
        )
        return MotionPrimitive(
            initial_gamma=float(tree.initial_gamma),
            control_segments=controls,
            sampled_poses=tree.leaf_poses(leaf_seg),
        )

    def params_hash(self) -> str:
        return _settings_hash(self.config, self.params, self.model)


def _settings_hash(config: PrimitiveConfig, params: VehicleParams, model: SphereModel) -> str:
    blob = json.dumps(
        {"config": asdict(config), "vehicle": asdict(params), "model": asdict(model)},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def _root_control_pairs(config: PrimitiveConfig, params: VehicleParams) -> list:
    """Deterministic root (v, gamma_dot) menu: extra slots go to slower speeds."""
    speeds = list(config.speeds)
    n = config.n_control_pairs
    base, rem = divmod(n, len(speeds))
    counts = [base + (1 if i < rem else 0) for i in range(len(speeds))]
    pairs = []
    for i, (v, count) in enumerate(zip(speeds, counts)):
        if count == 0:
            continue
        span = ROOT_STEER_SPANS[min(i, len(ROOT_STEER_SPANS) - 1)] * params.gamma_rate_max
        rates = np.linspace(-span, span, count) if count > 1 else np.array([0.0])
        pairs.extend((float(v), float(g)) for g in rates)
    return pairs


def rasterize_discs(centers: np.ndarray, radius: float, cell_size: float):
    """Cells whose squares intersect each disc (conservative closed-overlap).

    Returns (cells (K, 2) int32, owner (K,) int32 disc index).
    """
    centers = np.atleast_2d(centers)
    n_off = int(math.floor(2 * radius / cell_size)) + 2
    offs = np.arange(n_off)
    base = np.floor((centers - radius) / cell_size).astype(np.int64)
    ix = base[:, 0, None, None] + offs[None, :, None]
    iy = base[:, 1, None, None] + offs[None, None, :]
    # Distance from the disc center to the nearest point of each cell square.
    dx = np.maximum.reduce(
        [ix * cell_size - centers[:, 0, None, None],
         centers[:, 0, None, None] - (ix + 1) * cell_size,
         np.zeros_like(ix, dtype=float)]
    )
    dy = np.maximum.reduce(
        [iy * cell_size - centers[:, 1, None, None],
         centers[:, 1, None, None] - (iy + 1) * cell_size,
         np.zeros_like(iy, dtype=float)]
    )
    mask = dx * dx + dy * dy <= radius * radius
    owner = np.broadcast_to(
        np.arange(len(centers))[:, None, None], mask.shape
    )[mask].astype(np.int32)
    ix_b = np.broadcast_to(ix, mask.shape)
    iy_b = np.broadcast_to(iy, mask.shape)
    cells = np.stack([ix_b[mask], iy_b[mask]], axis=1).astype(np.int32)
    return cells, owner


def rasterize_footprint(
    primitive: MotionPrimitive,
    params: VehicleParams,
    model: SphereModel = SphereModel(),
    cell_size: float = 0.25,
) -> CollisionFootprint:
    """Per-pose cell cover of the three-disc model along a primitive."""
    poses = primitive.sampled_poses
    centers = disc_centers(poses, params)  # (N, 3, 2)
    per_pose = [[] for _ in range(len(poses))]
    for k, radius in enumerate(model.radii):
        cells, owner = rasterize_discs(centers[:, k, :], radius, cell_size)
        for pose_idx in range(len(poses)):
            sel = owner == pose_idx
            if sel.any():
                per_pose[pose_idx].append(cells[sel])
    merged = [
        np.unique(np.vstack(parts), axis=0) if parts else np.empty((0, 2), np.int32)
        for parts in per_pose
    ]
    return CollisionFootprint(cell_size=cell_size, per_pose_cells=merged)


def _sample_arc_poses(hist: np.ndarray, v: float, dt: float, arcs: np.ndarray) -> np.ndarray:
    """Interpolate poses at requested local arc lengths from a step history.

    hist is (n_steps+1, N, 4); returns (N, len(arcs), 4). Arc along a
    segment is v * t, so interpolation indices are shared by the batch.
    """
    step_arc = v * dt
    f = arcs / step_arc
    i0 = np.clip(np.floor(f).astype(int), 0, hist.shape[0] - 1)
    i1 = np.clip(i0 + 1, 0, hist.shape[0] - 1)
    w = np.clip(f - i0, 0.0, 1.0)
    w = np.where(i1 == i0, 0.0, w)
    a = hist[i0]  # (A, N, 4)
    b = hist[i1]
    out = a + w[:, None, None] * (b - a)
    return np.swapaxes(out, 0, 1)


def _integrate_batch(
    starts: np.ndarray, v: float, gamma_dots: np.ndarray, duration: float,
    dt: float, params: VehicleParams,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Roll a batch of segments forward; returns (history, end states, dt_used)."""
    n_steps = max(1, round(duration / dt))
    dt_used = duration / n_steps
    hist = np.empty((n_steps + 1, len(starts), 4))
    hist[0] = starts
    state = starts.copy()
    for k in range(n_steps):
        state = step_states_array(state, np.full(len(state), v), gamma_dots, dt_used, params)
        hist[k + 1] = state
    return hist, state, dt_used


_PACK_OFF = 1 << 15


def pack_cells(cells: np.ndarray) -> np.ndarray:
    """(N, 2) int cells -> (N,) int64 keys; indices must fit in int16."""
    c = np.asarray(cells, dtype=np.int64)
    return (c[:, 0] + _PACK_OFF) * (1 << 16) + (c[:, 1] + _PACK_OFF)


def unpack_cells(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    ix = keys // (1 << 16) - _PACK_OFF
    iy = keys % (1 << 16) - _PACK_OFF
    return np.stack([ix, iy], axis=1).astype(np.int16)


def generate_library(config: PrimitiveConfig, params: VehicleParams,
                     model: SphereModel = SphereModel()) -> PrimitiveLibrary:
    """Grow, sample, and rasterize every trajectory tree. Deterministic in
    (config, params, model); the seed drives split steering resampling.

    Integration is batched across all initial angles per (level, speed)
    group: the tree layout is identical for every angle, only the starting
    bend and the sampled split steering differ.
    """
    pairs = _root_control_pairs(config, params)
    if not pairs:
        raise InfeasibleConfig("no root control pairs")
    n_angles = config.n_initial_angles
    gammas = np.linspace(-params.gamma_max, params.gamma_max, n_angles)
    if n_angles == 1:
        gammas = np.array([0.0])
    streams = np.random.SeedSequence(config.seed).spawn(n_angles)
    b1, b2 = config.split_branching
    t1, t2 = config.split_numerators
    th = config.horizon_numerator
    n_roots = len(pairs)

    # Per-tree segment layout, shared by every angle (level-major).
    seg_parent, seg_level, seg_v, seg_dur = [], [], [], []
    for v, _ in pairs:
        seg_parent.append(-1); seg_level.append(0); seg_v.append(v); seg_dur.append(t1 / v)
    for r, (v, _) in enumerate(pairs):
        for _ in range(b1):
            seg_parent.append(r); seg_level.append(1); seg_v.append(v)
            seg_dur.append((t2 - t1) / v)
    for r, (v, _) in enumerate(pairs):
        for j in range(b1):
            for _ in range(b2):
                seg_parent.append(n_roots + r * b1 + j)
                seg_level.append(2); seg_v.append(v); seg_dur.append((th - t2) / v)
    n_segs = len(seg_parent)
    seg_parent = np.asarray(seg_parent, np.int32)
    seg_level = np.asarray(seg_level, np.int8)
    seg_v = np.asarray(seg_v)
    seg_dur = np.asarray(seg_dur)

    # Steering per (angle, segment): roots from the fixed menu, splits drawn
    # from each angle's own stream (level-1 draws first, then level-2).
    seg_gd_all = np.empty((n_angles, n_segs))
    for a in range(n_angles):
        rng = np.random.default_rng(streams[a])
        gd1 = rng.uniform(-params.gamma_rate_max, params.gamma_rate_max, (n_roots, b1))
        gd2 = rng.uniform(-params.gamma_rate_max, params.gamma_rate_max, (n_roots, b1, b2))
        seg_gd_all[a, :n_roots] = [gd for _, gd in pairs]
        seg_gd_all[a, n_roots: n_roots + n_roots * b1] = gd1.reshape(-1)
        seg_gd_all[a, n_roots + n_roots * b1:] = gd2.reshape(-1)

    spacing = config.pose_spacing
    pose_store: list = [[None] * n_segs for _ in range(n_angles)]
    end_states = np.empty((n_angles, n_segs, 4))

    for level, (arc_lo, arc_hi) in enumerate([(0.0, t1), (t1, t2), (t2, th)]):
        ids = np.flatnonzero(seg_level == level)
        for v in sorted(set(seg_v[ids])):
            sel = ids[seg_v[ids] == v]
            if level == 0:
                starts = np.zeros((n_angles * len(sel), 4))
                starts[:, 3] = np.repeat(gammas, len(sel))
            else:
                starts = end_states[:, seg_parent[sel], :].reshape(-1, 4)
            gds = seg_gd_all[:, sel].reshape(-1)
            hist, ends, dt_used = _integrate_batch(
                starts, float(v), gds, float(seg_dur[sel[0]]), config.sample_dt, params
            )
            end_states[:, sel, :] = ends.reshape(n_angles, len(sel), 4)
            first = arc_lo if level == 0 else arc_lo + spacing
            arcs = np.arange(first, arc_hi + 1e-9, spacing) - arc_lo
            sampled = _sample_arc_poses(hist, float(v), dt_used, arcs)
            sampled = sampled.reshape(n_angles, len(sel), len(arcs), 4)
            for a in range(n_angles):
                for i, s in enumerate(sel):
                    pose_store[a][s] = sampled[a, i]

    trees = []
    for a in range(n_angles):
        seg_poses = pose_store[a]
        all_poses = np.vstack(seg_poses)
        pose_counts = np.array([len(p) for p in seg_poses], dtype=np.int64)
        pose_seg = np.repeat(np.arange(n_segs), pose_counts)
        centers = disc_centers(all_poses, params)
        key_parts = []
        for k, radius in enumerate(model.radii):
            cells, owner = rasterize_discs(centers[:, k, :], radius, config.cell_size)
            key_parts.append(pose_seg[owner].astype(np.int64) * (1 << 32) + pack_cells(cells))
        keys = np.unique(np.concatenate(key_parts))
        owner_seg = keys >> 32
        cell_arr = unpack_cells(keys & ((1 << 32) - 1))
        bounds = np.searchsorted(owner_seg, np.arange(n_segs + 1))
        cell_counts = np.diff(bounds).astype(np.int64)

        trees.append(
            TrajectoryTree(
                initial_gamma=float(gammas[a]),
                seg_parent=seg_parent.copy(),
                seg_level=seg_level.copy(),
                seg_v=seg_v.copy(),
                seg_gamma_dot=seg_gd_all[a].copy(),
                seg_duration=seg_dur.copy(),
                seg_pose_start=np.concatenate([[0], np.cumsum(pose_counts)[:-1]]),
                seg_pose_count=pose_counts,
                poses=all_poses,
                seg_cell_start=bounds[:-1].astype(np.int64),
                seg_cell_count=cell_counts,
                cells=cell_arr,
            )
        )
        if len(trees[-1].leaf_ids) == 0:
            raise InfeasibleConfig(f"no feasible trajectories for initial angle {gammas[a]}")

    return PrimitiveLibrary(
        config=config,
        params=params,
        model=model,
        initial_gammas=gammas,
        trees=trees,
    )


_TREE_FIELDS = (
    "seg_parent", "seg_level", "seg_v", "seg_gamma_dot", "seg_duration",
    "seg_pose_start", "seg_pose_count", "poses",
    "seg_cell_start", "seg_cell_count", "cells",
)


def save_library_bytes(lib: PrimitiveLibrary) -> bytes:
    """Serialize: magic, JSON header with an array index, raw array payload."""
    arrays: list[tuple[str, np.ndarray]] = [("initial_gammas", lib.initial_gammas)]
    for t_idx, tree in enumerate(lib.trees):
        for name in _TREE_FIELDS:
            arrays.append((f"t{t_idx:03d}.{name}", getattr(tree, name)))

    index = []
    offset = 0
    payload = io.BytesIO()
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append(
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
             "offset": offset, "nbytes": len(raw)}
        )
        payload.write(raw)
        offset += len(raw)

    header = {
        "format": "forestnav-primitives",
        "version": FORMAT_VERSION,
        "config": asdict(lib.config),
        "vehicle": asdict(lib.params),
        "model": asdict(lib.model),
        "params_hash": lib.params_hash(),
        "tree_gammas": [t.initial_gamma for t in lib.trees],
        "arrays": index,
    }
    head = json.dumps(header, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(FORMAT_MAGIC)
    out.write(len(head).to_bytes(8, "little"))
    out.write(head)
    out.write(payload.getvalue())
    return out.getvalue()


def save_library(lib: PrimitiveLibrary, path) -> None:
    with open(path, "wb") as f:
        f.write(save_library_bytes(lib))


def load_library_bytes(blob: bytes, expected_params: VehicleParams | None = None) -> PrimitiveLibrary:
    if blob[: len(FORMAT_MAGIC)] != FORMAT_MAGIC:
        raise CorruptFile("bad magic")
    try:
        head_len = int.from_bytes(blob[8:16], "little")
        header = json.loads(blob[16: 16 + head_len])
        payload = blob[16 + head_len:]
    except (ValueError, UnicodeDecodeError) as e:
        raise CorruptFile(f"unreadable header: {e}") from e
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"container version {header.get('version')}")

    try:
        config = PrimitiveConfig(
            **{**header["config"],
               "split_numerators": tuple(header["config"]["split_numerators"]),
               "split_branching": tuple(header["config"]["split_branching"]),
               "speeds": tuple(header["config"]["speeds"])}
        )
        params = VehicleParams(**header["vehicle"])
        model = SphereModel(**header["model"])
    except (TypeError, ValueError, KeyError) as e:
        raise CorruptFile(f"invalid header settings: {e}") from e
    if _settings_hash(config, params, model) != header["params_hash"]:
        raise VersionMismatch("settings hash does not match header contents")
    if expected_params is not None and params != expected_params:
        raise VersionMismatch("library was generated for different vehicle params")

    loaded: dict[str, np.ndarray] = {}
    for ent in header["arrays"]:
        lo, hi = ent["offset"], ent["offset"] + ent["nbytes"]
        if hi > len(payload):
            raise CorruptFile(f"truncated payload for {ent['name']}")
        arr = np.frombuffer(payload[lo:hi], dtype=np.dtype(ent["dtype"]).newbyteorder("<"))
        loaded[ent["name"]] = arr.reshape(ent["shape"]).astype(ent["dtype"], copy=True)

    trees = []
    for t_idx, gamma0 in enumerate(header["tree_gammas"]):
        kwargs = {name: loaded[f"t{t_idx:03d}.{name}"] for name in _TREE_FIELDS}
        trees.append(TrajectoryTree(initial_gamma=gamma0, **kwargs))
    return PrimitiveLibrary(
        config=config, params=params, model=model,
        initial_gammas=loaded["initial_gammas"], trees=trees,
    )


def load_library(path, expected_params: VehicleParams | None = None) -> PrimitiveLibrary:
    with open(path, "rb") as f:
        return load_library_bytes(f.read(), expected_params)

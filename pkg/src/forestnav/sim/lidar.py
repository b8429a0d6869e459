"""Spinning-LiDAR simulation over the analytic world geometry.

First-hit ray casting against the heightfield (marching + bisection),
stem cylinders, canopy ellipsoids, shrub spheres, and human cylinders.
Every return carries the semantic class of the primitive it struck plus a
traversability logit from the scoring oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .world import ForestWorld


class SemanticLabel(IntEnum):
    GROUND = 0
    SHRUB = 1
    STEM = 2
    CANOPY = 3
    HUMAN = 4


# Class score remap: drivable ground 1, soft undergrowth 0.8, everything
# blocking 0. Humans score 0 so the planner treats them as obstacles.
TRAVERSABILITY_SCORES = {
    SemanticLabel.GROUND: 1.0,
    SemanticLabel.SHRUB: 0.8,
    SemanticLabel.STEM: 0.0,
    SemanticLabel.CANOPY: 0.0,
    SemanticLabel.HUMAN: 0.0,
}

SCORE_CLIP = (0.02, 0.98)


@dataclass(frozen=True)
class LidarPattern:
    beams: int = 32
    vfov: tuple[float, float] = (-math.radians(16.0), math.radians(16.0))
    azimuth_step: float = math.radians(1.0)
    max_range: float = 60.0
    range_noise: float = 0.0  # m, 1-sigma

    def directions(self, yaw: float = 0.0) -> np.ndarray:
        az = np.arange(0.0, 2 * math.pi, self.azimuth_step) + yaw
        el = np.linspace(self.vfov[0], self.vfov[1], self.beams)
        aa, ee = np.meshgrid(az, el)
        ce = np.cos(ee.ravel())
        return np.stack([ce * np.cos(aa.ravel()), ce * np.sin(aa.ravel()),
                         np.sin(ee.ravel())], 1)


@dataclass
class LabeledScan:
    origin: np.ndarray           # (3,)
    points: np.ndarray           # (N, 3)
    labels: np.ndarray           # (N,) SemanticLabel values
    trav_logits: np.ndarray = None

    def __len__(self):
        return len(self.points)


def score_to_logit(score) -> np.ndarray:
    p = np.clip(np.asarray(score, dtype=float), SCORE_CLIP[0], SCORE_CLIP[1])
    return np.log(p / (1.0 - p))


def oracle_traversability(labels, noise: float = 0.0, rng: np.random.Generator | None = None):
    """Per-point scores and logits from the class remap.

    With probability `noise`, a point's score is replaced by the score of a
    uniformly drawn *other* class. Accepts a scalar label or an array.
    """
    if not 0.0 <= noise < 0.5:
        raise ValueError("noise must lie in [0, 0.5)")
    scalar = np.isscalar(labels) or isinstance(labels, SemanticLabel)
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    table = np.array([TRAVERSABILITY_SCORES[SemanticLabel(k)] for k in range(5)])
    scores = table[lab]
    if noise > 0.0:
        if rng is None:
            raise ValueError("noise requires an rng")
        flip = rng.uniform(size=len(lab)) < noise
        # Uniform draw over the four other classes.
        offset = rng.integers(1, 5, size=len(lab))
        scores = np.where(flip, table[(lab + offset) % 5], scores)
    logits = score_to_logit(scores)
    if scalar:
        return float(scores[0]), float(logits[0])
    return scores, logits


def _quadratic_first_hit(a, b, c, t_lo=1e-6):
    """Smallest positive root of a t^2 + b t + c per column; inf if none."""
    disc = b * b - 4.0 * a * c
    ok = disc >= 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t1 = np.where(ok, (-b - sq) / (2.0 * a), np.inf)
    t2 = np.where(ok, (-b + sq) / (2.0 * a), np.inf)
    t1 = np.where(t1 > t_lo, t1, np.inf)
    t2 = np.where(t2 > t_lo, t2, np.inf)
    return np.minimum(t1, t2)


def _ground_hits(world: ForestWorld, origin, dirs, max_range):
    """First heightfield crossing by coarse marching plus bisection."""
    n = len(dirs)
    coarse = np.linspace(0.25, max_range, 2 * int(max_range) + 1)
    t_hit = np.full(n, np.inf)
    lo = np.zeros(n)
    hi = np.zeros(n)
    found = np.zeros(n, dtype=bool)
    prev = np.full(n, coarse[0] * 0.0 + 1e-6)
    px = origin[0] + 1e-6 * dirs[:, 0]
    py = origin[1] + 1e-6 * dirs[:, 1]
    above_prev = origin[2] + 1e-6 * dirs[:, 2] > world.ground_height(px, py)
    for t in coarse:
        x = origin[0] + t * dirs[:, 0]
        y = origin[1] + t * dirs[:, 1]
        z = origin[2] + t * dirs[:, 2]
        above = z > world.ground_height(x, y)
        crossed = above_prev & ~above & ~found
        lo[crossed] = prev[crossed]
        hi[crossed] = t
        found |= crossed
        above_prev = above
        prev = np.full(n, t)
        if found.all():
            break
    idx = np.flatnonzero(found)
    if len(idx):
        a, b = lo[idx], hi[idx]
        for _ in range(24):
            m = 0.5 * (a + b)
            x = origin[0] + m * dirs[idx, 0]
            y = origin[1] + m * dirs[idx, 1]
            z = origin[2] + m * dirs[idx, 2]
            above = z > world.ground_height(x, y)
            a = np.where(above, m, a)
            b = np.where(above, b, m)
        t_hit[idx] = 0.5 * (a + b)
    return t_hit


def _cylinder_hits(origin, dirs, centers, radii, z_lo, z_hi):
    """First hit against vertical finite cylinders; (R,) min over all."""
    if len(centers) == 0:
        return np.full(len(dirs), np.inf)
    ox = origin[0] - centers[:, 0]      # (N,)
    oy = origin[1] - centers[:, 1]
    dx = dirs[:, 0][:, None]            # (R, 1)
    dy = dirs[:, 1][:, None]
    a = dx * dx + dy * dy
    a = np.where(a < 1e-12, 1e-12, a)
    b = 2.0 * (dx * ox[None, :] + dy * oy[None, :])
    c = (ox * ox + oy * oy)[None, :] - (radii * radii)[None, :]
    t = _quadratic_first_hit(a, b, c)
    with np.errstate(invalid="ignore"):
        z = origin[2] + t * dirs[:, 2][:, None]
        t = np.where((z >= z_lo[None, :]) & (z <= z_hi[None, :]), t, np.inf)
    return t.min(axis=1)


def _ellipsoid_hits(origin, dirs, centers, semi_xy, semi_z):
    if len(centers) == 0:
        return np.full(len(dirs), np.inf)
    inv_xy = 1.0 / semi_xy
    inv_z = 1.0 / semi_z
    ox = (origin[0] - centers[:, 0]) * inv_xy
    oy = (origin[1] - centers[:, 1]) * inv_xy
    oz = (origin[2] - centers[:, 2]) * inv_z
    dx = dirs[:, 0][:, None] * inv_xy[None, :]
    dy = dirs[:, 1][:, None] * inv_xy[None, :]
    dz = dirs[:, 2][:, None] * inv_z[None, :]
    a = dx * dx + dy * dy + dz * dz
    b = 2.0 * (dx * ox[None, :] + dy * oy[None, :] + dz * oz[None, :])
    c = (ox * ox + oy * oy + oz * oz)[None, :] - 1.0
    return _quadratic_first_hit(a, b, c).min(axis=1)


def _sphere_hits(origin, dirs, centers, radii):
    if len(centers) == 0:
        return np.full(len(dirs), np.inf)
    o = origin[None, :] - centers        # (N, 3)
    b = 2.0 * dirs @ o.T                 # (R, N)
    a = np.ones_like(b)
    c = np.einsum("ns,ns->n", o, o)[None, :] - (radii * radii)[None, :]
    return _quadratic_first_hit(a, b, c).min(axis=1)


def simulate_lidar(
    world: ForestWorld,
    sensor_position,
    pattern: LidarPattern = LidarPattern(),
    yaw: float = 0.0,
    rng: np.random.Generator | None = None,
    oracle_noise: float = 0.0,
) -> LabeledScan:
    """One full sweep: first hit per ray with its semantic label and logit."""
    origin = np.asarray(sensor_position, dtype=float)
    dirs = pattern.directions(yaw)
    alive = world.alive_trees()

    ground_z = np.asarray(world.ground_height(world.tree_pos[alive, 0],
                                              world.tree_pos[alive, 1]))
    cand = np.stack([
        _ground_hits(world, origin, dirs, pattern.max_range),
        _sphere_hits(
            origin, dirs,
            np.column_stack([world.shrub_pos,
                             np.asarray(world.ground_height(world.shrub_pos[:, 0],
                                                            world.shrub_pos[:, 1]))
                             + world.shrub_height * 0.5])
            if len(world.shrub_pos) else np.empty((0, 3)),
            world.shrub_radius,
        ),
        _cylinder_hits(origin, dirs, world.tree_pos[alive], world.stem_radius[alive],
                       ground_z, ground_z + world.tree_height[alive]),
        _ellipsoid_hits(
            origin, dirs,
            np.column_stack([world.tree_pos[alive],
                             ground_z + world.canopy_z0[alive]
                             + 0.5 * (world.tree_height[alive] - world.canopy_z0[alive])]),
            world.canopy_radius[alive],
            0.5 * (world.tree_height[alive] - world.canopy_z0[alive]),
        ),
        _cylinder_hits(
            origin, dirs,
            np.array([h.position for h in world.humans]).reshape(-1, 2),
            np.array([h.radius for h in world.humans]),
            np.asarray([world.ground_height(*h.position) for h in world.humans]).reshape(-1),
            np.asarray([world.ground_height(*h.position) + h.height for h in world.humans]).reshape(-1),
        ) if world.humans else np.full(len(dirs), np.inf),
    ])
    label = np.argmin(cand, axis=0)
    t = cand[label, np.arange(cand.shape[1])]
    hit = np.isfinite(t) & (t <= pattern.max_range)
    t = t[hit]
    dirs = dirs[hit]
    labels = label[hit].astype(np.int8)
    if pattern.range_noise > 0.0:
        if rng is None:
            raise ValueError("range noise requires an rng")
        t = t + rng.normal(0.0, pattern.range_noise, len(t))
    points = origin[None, :] + t[:, None] * dirs
    _, logits = oracle_traversability(labels, oracle_noise, rng) if len(labels) else (
        np.empty(0), np.empty(0))
    return LabeledScan(origin=origin, points=points, labels=labels, trav_logits=logits)

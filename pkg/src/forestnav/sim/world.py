"""Procedural forest worlds.

Poisson-disc tree placement over an undulating analytic heightfield, shrub
scatter, a winding trail corridor kept clear from the spawn side to the far
side, and optional walking humans. Regeneration from (seed, params) is
byte-identical; all randomness flows from one seed sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import InfeasibleWorld


@dataclass(frozen=True)
class WorldParams:
    size: tuple[float, float] = (60.0, 40.0)   # m
    tree_density: float = 350.0                # trees per hectare
    min_spacing: float = 3.0                   # m between stem centers
    shrub_density: float = 120.0               # shrubs per hectare
    slope_amplitude: float = 0.4               # m of heightfield relief
    trail_width: float = 3.5                   # m of cleared corridor
    trail_amplitude: float = 2.5               # m of lateral wander
    trail_wavelength: float = 45.0             # m
    n_humans: int = 0
    human_speed: float = 1.2                   # m/s, capped at 1.5
    clearance_radius: float = 1.3              # m, connectivity-check clearance
    max_retries: int = 20

    def __post_init__(self):
        if self.tree_density < 0 or self.shrub_density < 0:
            raise ValueError("densities must be non-negative")
        if self.human_speed > 1.5:
            raise ValueError("human agents are capped at 1.5 m/s")

    @classmethod
    def from_dict(cls, cfg: dict, prefix: str = "world.") -> "WorldParams":
        g = lambda k, d: cfg.get(prefix + k, d)
        d = cls()
        return cls(
            size=(float(g("size_x", d.size[0])), float(g("size_y", d.size[1]))),
            tree_density=float(g("tree_density", d.tree_density)),
            min_spacing=float(g("min_spacing", d.min_spacing)),
            shrub_density=float(g("shrub_density", d.shrub_density)),
            slope_amplitude=float(g("slope_amplitude", d.slope_amplitude)),
            trail_width=float(g("trail_width", d.trail_width)),
            n_humans=int(g("n_humans", d.n_humans)),
            human_speed=float(g("human_speed", d.human_speed)),
        )


@dataclass
class Human:
    position: np.ndarray            # (2,)
    waypoints: np.ndarray           # (K, 2)
    speed: float
    radius: float = 0.3
    height: float = 1.8
    _wp: int = 0

    def step(self, dt: float) -> None:
        budget = self.speed * dt
        while budget > 1e-12 and self._wp < len(self.waypoints):
            target = self.waypoints[self._wp]
            d = target - self.position
            dist = float(np.hypot(*d))
            if dist <= budget:
                self.position = target.copy()
                budget -= dist
                self._wp += 1
            else:
                self.position = self.position + d / dist * budget
                budget = 0.0


@dataclass
class ForestWorld:
    seed: int
    params: WorldParams
    tree_pos: np.ndarray        # (N, 2)
    stem_radius: np.ndarray     # (N,)
    tree_height: np.ndarray     # (N,)
    canopy_radius: np.ndarray   # (N,)
    canopy_z0: np.ndarray       # (N,) above-ground canopy base
    shrub_pos: np.ndarray       # (M, 2)
    shrub_radius: np.ndarray
    shrub_height: np.ndarray
    trail: np.ndarray           # (K, 2) polyline
    humans: list = field(default_factory=list)
    tree_alive: np.ndarray = None  # bool mask; cut trees turn False
    _height_coeffs: tuple = ()

    def __post_init__(self):
        if self.tree_alive is None:
            self.tree_alive = np.ones(len(self.tree_pos), dtype=bool)

    # Heightfield ---------------------------------------------------------

    def ground_height(self, x, y):
        """Analytic terrain elevation; exact for ray intersection tests."""
        a1, a2, l1, l2, p1, p2 = self._height_coeffs
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (
            a1 * np.sin(2 * math.pi * x / l1 + p1) * np.cos(2 * math.pi * y / l2 + p2)
            + a2 * np.sin(2 * math.pi * (x + y) / (l1 + l2))
        )

    def heightfield_grid(self, resolution: float = 0.5):
        xs = np.arange(0.0, self.params.size[0] + resolution, resolution)
        ys = np.arange(0.0, self.params.size[1] + resolution, resolution)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return xs, ys, self.ground_height(gx, gy)

    # Regions -------------------------------------------------------------

    @property
    def spawn(self) -> np.ndarray:
        return self.trail[0]

    @property
    def far_point(self) -> np.ndarray:
        return self.trail[-1]

    def alive_trees(self) -> np.ndarray:
        return np.flatnonzero(self.tree_alive)

    def remove_tree(self, index: int) -> None:
        self.tree_alive[index] = False

    def nearest_tree(self, point) -> int:
        alive = self.alive_trees()
        d = np.linalg.norm(self.tree_pos[alive] - np.asarray(point), axis=1)
        return int(alive[np.argmin(d)])

    # Export ---------------------------------------------------------------

    def sample_surface_points(self, stem_step: float = 0.35, ground_step: float = 0.7):
        """Deterministic surface sampling: (points (N, 3), labels (N,)).

        Covers ground, stems, canopy shells, and shrubs so a registered
        scan finds correspondences for every class it can see. Labels
        follow sim.lidar.SemanticLabel; used to build prior maps and
        console exports without running the LiDAR model.
        """
        pts = []
        labels = []
        for i in self.alive_trees():
            x, y = self.tree_pos[i]
            r = self.stem_radius[i]
            g = float(self.ground_height(x, y))
            n_ang = max(6, int(2 * math.pi * r / 0.08))
            ang = np.linspace(0.0, 2 * math.pi, n_ang, endpoint=False)
            zs = np.arange(0.0, self.tree_height[i], stem_step)
            aa, zz = np.meshgrid(ang, zs)
            pts.append(np.stack([
                x + r * np.cos(aa.ravel()),
                y + r * np.sin(aa.ravel()),
                g + zz.ravel(),
            ], 1))
            labels.append(np.full(aa.size, 2))
            # Canopy ellipsoid shell at a coarse angular grid.
            cr = self.canopy_radius[i]
            cz0 = g + self.canopy_z0[i]
            cz1 = g + self.tree_height[i]
            zc, sz = 0.5 * (cz0 + cz1), 0.5 * (cz1 - cz0)
            u = np.linspace(0.0, 2 * math.pi, 14, endpoint=False)
            v = np.linspace(-1.2, 1.2, 7)
            uu, vv = np.meshgrid(u, v)
            pts.append(np.stack([
                x + cr * np.cos(vv.ravel()) * np.cos(uu.ravel()),
                y + cr * np.cos(vv.ravel()) * np.sin(uu.ravel()),
                zc + sz * np.sin(vv.ravel()),
            ], 1))
            labels.append(np.full(uu.size, 3))
        for j in range(len(self.shrub_pos)):
            x, y = self.shrub_pos[j]
            g = float(self.ground_height(x, y))
            r = self.shrub_radius[j]
            u = np.linspace(0.0, 2 * math.pi, 10, endpoint=False)
            v = np.linspace(0.1, 1.4, 4)
            uu, vv = np.meshgrid(u, v)
            pts.append(np.stack([
                x + r * np.cos(vv.ravel()) * np.cos(uu.ravel()),
                y + r * np.cos(vv.ravel()) * np.sin(uu.ravel()),
                g + self.shrub_height[j] * 0.5 + r * np.sin(vv.ravel()),
            ], 1))
            labels.append(np.full(uu.size, 1))
        xs = np.arange(0.3, self.params.size[0], ground_step)
        ys = np.arange(0.3, self.params.size[1], ground_step)
        gx, gy = np.meshgrid(xs, ys)
        gpts = np.stack([gx.ravel(), gy.ravel(),
                         np.asarray(self.ground_height(gx.ravel(), gy.ravel()))], 1)
        pts.append(gpts)
        labels.append(np.full(len(gpts), 0))
        return np.vstack(pts), np.concatenate(labels).astype(np.int8)


def _poisson_disc(rng, size, count, min_spacing, max_attempts=30):
    """Dart throwing with a neighbor grid; yields up to `count` points."""
    cell = max(min_spacing / math.sqrt(2.0), 1e-6)
    nx = int(size[0] / cell) + 1
    ny = int(size[1] / cell) + 1
    grid = -np.ones((nx, ny), dtype=np.int64)
    pts: list = []
    attempts = 0
    limit = count * max_attempts
    while len(pts) < count and attempts < limit:
        attempts += 1
        p = rng.uniform((0.0, 0.0), size)
        ci, cj = int(p[0] / cell), int(p[1] / cell)
        ok = True
        reach = int(math.ceil(min_spacing / cell))
        for di in range(-reach, reach + 1):
            for dj in range(-reach, reach + 1):
                ii, jj = ci + di, cj + dj
                if 0 <= ii < nx and 0 <= jj < ny and grid[ii, jj] >= 0:
                    if np.hypot(*(pts[grid[ii, jj]] - p)) < min_spacing:
                        ok = False
                        break
            if not ok:
                break
        if ok:
            grid[ci, cj] = len(pts)
            pts.append(p)
    return np.asarray(pts) if pts else np.empty((0, 2))


def _trail_polyline(params: WorldParams, rng) -> np.ndarray:
    sx, sy = params.size
    xs = np.linspace(2.0, sx - 2.0, max(8, int(sx / 2)))
    phase = rng.uniform(0.0, 2 * math.pi)
    ys = sy / 2.0 + params.trail_amplitude * np.sin(2 * math.pi * xs / params.trail_wavelength + phase)
    return np.stack([xs, ys], 1)


def _dist_to_polyline(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from each point to a polyline (min over segments)."""
    p = np.asarray(points, dtype=float)[:, None, :]
    a = poly[None, :-1, :]
    b = poly[None, 1:, :]
    ab = b - a
    t = np.clip(np.einsum("nks,nks->nk", p - a, ab) / np.einsum("nks,nks->nk", ab, ab), 0, 1)
    proj = a + t[:, :, None] * ab
    return np.min(np.linalg.norm(p - proj, axis=2), axis=1)


def _connected(world: ForestWorld, clearance: float) -> bool:
    """Grid BFS from spawn to the far point avoiding stem discs."""
    res = 0.5
    sx, sy = world.params.size
    nx, ny = int(sx / res) + 1, int(sy / res) + 1
    free = np.ones((nx, ny), dtype=bool)
    xs = (np.arange(nx) + 0.5) * res
    ys = (np.arange(ny) + 0.5) * res
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel()], 1)
    for i in world.alive_trees():
        r = world.stem_radius[i] + clearance
        mask = np.linalg.norm(centers - world.tree_pos[i], axis=1) < r
        free.ravel()[mask] = False
    start = tuple(np.clip((world.spawn / res).astype(int), 0, (nx - 1, ny - 1)))
    goal = tuple(np.clip((world.far_point / res).astype(int), 0, (nx - 1, ny - 1)))
    if not free[start] or not free[goal]:
        return False
    frontier = [start]
    seen = {start}
    while frontier:
        cx, cy = frontier.pop()
        if (cx, cy) == goal:
            return True
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            n = (cx + dx, cy + dy)
            if 0 <= n[0] < nx and 0 <= n[1] < ny and n not in seen and free[n]:
                seen.add(n)
                frontier.append(n)
    return False


def generate_world(seed: int, params: WorldParams = WorldParams()) -> ForestWorld:
    """Deterministic world; raises InfeasibleWorld if no connected layout is
    found within max_retries attempts (each attempt re-seeded from `seed`)."""
    area_ha = params.size[0] * params.size[1] / 10_000.0
    n_trees = int(round(params.tree_density * area_ha))
    n_shrubs = int(round(params.shrub_density * area_ha))

    for attempt in range(params.max_retries):
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempt)))
        coeffs = (
            params.slope_amplitude * 0.7,
            params.slope_amplitude * 0.3,
            rng.uniform(18.0, 30.0),
            rng.uniform(14.0, 24.0),
            rng.uniform(0.0, 2 * math.pi),
            rng.uniform(0.0, 2 * math.pi),
        )
        trail = _trail_polyline(params, rng)
        tree_pos = _poisson_disc(rng, params.size, n_trees, params.min_spacing)
        if len(tree_pos):
            keep = _dist_to_polyline(tree_pos, trail) > params.trail_width / 2.0 + 0.3
            tree_pos = tree_pos[keep]
        n = len(tree_pos)
        world = ForestWorld(
            seed=seed,
            params=params,
            tree_pos=tree_pos,
            stem_radius=rng.uniform(0.10, 0.22, n),
            tree_height=rng.uniform(6.0, 13.0, n),
            canopy_radius=rng.uniform(0.8, 1.8, n),
            canopy_z0=rng.uniform(2.2, 3.2, n),
            shrub_pos=np.empty((0, 2)),
            shrub_radius=np.empty(0),
            shrub_height=np.empty(0),
            trail=trail,
            _height_coeffs=coeffs,
        )
        if n_shrubs:
            cand = rng.uniform((0.0, 0.0), params.size, (n_shrubs * 2, 2))
            ok = _dist_to_polyline(cand, trail) > params.trail_width / 2.0
            if n:
                d_tree = np.min(
                    np.linalg.norm(cand[:, None, :] - tree_pos[None, :, :], axis=2), axis=1
                )
                ok &= d_tree > 0.8
            cand = cand[ok][:n_shrubs]
            world.shrub_pos = cand
            world.shrub_radius = rng.uniform(0.3, 0.7, len(cand))
            world.shrub_height = rng.uniform(0.3, 0.9, len(cand))
        for _ in range(params.n_humans):
            a = trail[rng.integers(2, len(trail) - 2)] + rng.uniform(-1, 1, 2)
            b = a + rng.uniform(-8, 8, 2)
            world.humans.append(Human(
                position=a.copy(),
                waypoints=np.stack([b, a]),
                speed=min(params.human_speed, 1.5),
            ))
        if _connected(world, params.clearance_radius):
            return world
    raise InfeasibleWorld(f"no connected layout after {params.max_retries} attempts")


def step_dynamics(world: ForestWorld, dt: float) -> None:
    """Advance walking humans along their waypoints; nothing else moves."""
    for h in world.humans:
        h.step(dt)

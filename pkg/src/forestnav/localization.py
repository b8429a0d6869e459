"""One-shot localization in a prior point-cloud map.

Robust point-to-point registration: fixed-radius nearest-neighbor
association against a voxel-downsampled map, Geman-McClure weighted
Gauss-Newton on a 6-vector correction applied through a rotation-vector +
translation local parameterization, step halving on cost increase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import LocalizationRejected, NoCorrespondences


@dataclass(frozen=True)
class RegistrationParams:
    r_assoc: float = 1.0          # m, association radius (final)
    gm_scale: float = 0.25        # m, robust kernel scale c (final)
    max_iters: int = 50
    convergence_eps: float = 1e-5
    min_correspondences: int = 10
    inlier_dist: float = 0.5      # m, residual radius counted as inlier
    min_inlier_fraction: float = 0.3
    robust: bool = True           # False: plain least squares (ablation)
    # Coarse-to-fine warm start: association radius and kernel scale decay
    # linearly to their final values over anneal_iters iterations.
    r_assoc_init: float = 3.0
    gm_scale_init: float = 1.5
    anneal_iters: int = 10
    # Deterministic yaw multi-start covering the stationary-guess envelope;
    # each offset seeds a short coarse pass, the best candidate is refined.
    yaw_starts: tuple = (0.0, 0.13, -0.13, 0.26, -0.26)
    coarse_iters: int = 14
    coarse_subsample: int = 3     # every k-th scan point in coarse passes


def _anneal(init: float, final: float, k: int, n: int) -> float:
    if n <= 0 or k >= n:
        return final
    return final + (init - final) * (n - k) / n


@dataclass
class PoseEstimate:
    transform: np.ndarray         # (4, 4) rigid transform, scan -> map
    iterations: int
    final_cost: float
    inlier_fraction: float
    converged: bool
    cost_trace: list = field(default_factory=list)  # (before, after) per accepted step

    @property
    def rotation(self) -> np.ndarray:
        return self.transform[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.transform[:3, 3]


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues map from a rotation vector to a rotation matrix."""
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        k = skew(w)
        return np.eye(3) + k + 0.5 * (k @ k)
    axis = w / theta
    k = skew(axis)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def skew(w) -> np.ndarray:
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def boxplus(T: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """Apply a 6-vector correction (rotation vector, translation) to a pose."""
    out = T.copy()
    out[:3, :3] = exp_so3(dx[:3]) @ T[:3, :3]
    out[:3, 3] = T[:3, 3] + dx[3:]
    return out


def make_transform(rotation=None, translation=None) -> np.ndarray:
    T = np.eye(4)
    if rotation is not None:
        T[:3, :3] = rotation
    if translation is not None:
        T[:3, 3] = translation
    return T


def apply_transform(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ T[:3, :3].T + T[:3, 3]


def gm_rho(e_sq, c: float):
    """Geman-McClure loss of the squared residual."""
    return e_sq / (1.0 + e_sq / (c * c))


def gm_weight(e_sq, c: float):
    """d(rho)/d(e_sq): IRLS weight; 1 at zero residual, redescending."""
    return (1.0 + e_sq / (c * c)) ** -2


@dataclass
class PriorMap:
    """Voxel-downsampled map points plus their spatial index."""

    points: np.ndarray
    voxel_ds: float
    tree: cKDTree = None

    def __post_init__(self):
        if self.tree is None:
            self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)


def voxel_downsample(points: np.ndarray, voxel_ds: float,
                     max_pts_per_voxel: int = 1) -> PriorMap:
    """Keep the first max_pts_per_voxel points per voxel, input order."""
    if voxel_ds <= 0:
        raise ValueError("voxel_ds must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    idx = np.floor(pts / voxel_ds).astype(np.int64)
    key = (idx[:, 0] + (1 << 20)) * (1 << 21) + (idx[:, 1] + (1 << 20))
    key = key * (1 << 21) + (idx[:, 2] + (1 << 20))
    order = np.argsort(key, kind="stable")
    sorted_keys = key[order]
    new_group = np.concatenate([[True], sorted_keys[1:] != sorted_keys[:-1]])
    rank = np.arange(len(key)) - np.maximum.accumulate(np.where(new_group, np.arange(len(key)), 0))
    keep = order[rank < max_pts_per_voxel]
    keep.sort()  # restore first-come input order
    return PriorMap(points=pts[keep].copy(), voxel_ds=voxel_ds)


def associate(scan: np.ndarray, prior: PriorMap, T: np.ndarray, r_assoc: float):
    """Nearest map point within r_assoc of each transformed scan point.

    Returns (scan_idx, map_idx) index arrays of the correspondence set.
    """
    moved = apply_transform(T, np.asarray(scan, dtype=float))
    dist, idx = prior.tree.query(moved, k=1, distance_upper_bound=r_assoc)
    ok = np.isfinite(dist)
    return np.flatnonzero(ok), idx[ok]


def robust_register(scan: np.ndarray, prior: PriorMap, T0: np.ndarray,
                    params: RegistrationParams = RegistrationParams()) -> PoseEstimate:
    """Iteratively re-weighted Gauss-Newton alignment of scan onto the map.

    When several yaw starts are configured, each seeds a short coarse pass
    on a subsampled scan; the candidate with the best agreement refines at
    full resolution. Fully deterministic.
    """
    scan = np.asarray(scan, dtype=float).reshape(-1, 3)
    if len(scan) == 0:
        raise NoCorrespondences("empty scan")
    T0 = np.asarray(T0, dtype=float)

    starts = params.yaw_starts if len(params.yaw_starts) > 0 else (0.0,)
    if len(starts) == 1:
        T_seed = boxplus(T0, np.array([0.0, 0.0, starts[0], 0.0, 0.0, 0.0]))
        return _register_once(scan, prior, T_seed, params, params.max_iters)

    sub = scan[:: max(1, params.coarse_subsample)]
    best = None
    for dyaw in starts:
        T_start = boxplus(T0, np.array([0.0, 0.0, dyaw, 0.0, 0.0, 0.0]))
        try:
            cand = _register_once(sub, prior, T_start, params, params.coarse_iters)
        except NoCorrespondences:
            continue
        # Common agreement metric across candidates: fraction of coarse
        # points within 0.3 m of the map.
        d, _ = prior.tree.query(apply_transform(cand.transform, sub), k=1,
                                distance_upper_bound=0.3)
        score = float(np.isfinite(d).mean())
        if best is None or score > best[0] + 1e-12:
            best = (score, cand.transform)
    if best is None:
        raise NoCorrespondences("no yaw start produced correspondences")
    return _register_once(scan, prior, best[1], params, params.max_iters)


def _register_once(scan: np.ndarray, prior: PriorMap, T0: np.ndarray,
                   params: RegistrationParams, max_iters: int) -> PoseEstimate:
    T = np.asarray(T0, dtype=float).copy()
    cost_trace = []
    converged = False
    iters = 0
    final_cost = math.inf

    for iters in range(1, max_iters + 1):
        r_assoc = _anneal(params.r_assoc_init, params.r_assoc, iters - 1, params.anneal_iters)
        c = _anneal(params.gm_scale_init, params.gm_scale, iters - 1, params.anneal_iters)
        s_idx, m_idx = associate(scan, prior, T, r_assoc)
        if len(s_idx) < params.min_correspondences:
            raise NoCorrespondences(
                f"{len(s_idx)} correspondences at iteration {iters}, "
                f"need {params.min_correspondences}"
            )
        s = scan[s_idx]
        m = prior.points[m_idx]

        def chi(T_eval):
            r = apply_transform(T_eval, s) - m
            e = np.einsum("ni,ni->n", r, r)
            return float(np.sum(gm_rho(e, c)) if params.robust else np.sum(e))

        p = s @ T[:3, :3].T  # rotated, untranslated points
        r = p + T[:3, 3] - m
        e = np.einsum("ni,ni->n", r, r)
        w = gm_weight(e, c) if params.robust else np.ones(len(e))

        # J_i = [-skew(p_i) | I]; accumulate weighted normal equations.
        J = np.zeros((len(s), 3, 6))
        J[:, 0, 1] = p[:, 2]
        J[:, 0, 2] = -p[:, 1]
        J[:, 1, 0] = -p[:, 2]
        J[:, 1, 2] = p[:, 0]
        J[:, 2, 0] = p[:, 1]
        J[:, 2, 1] = -p[:, 0]
        J[:, :, 3:] = np.eye(3)
        H = np.einsum("nij,n,nik->jk", J, w, J)
        b = -np.einsum("nij,n,ni->j", J, w, r)
        try:
            dx = np.linalg.solve(H, b)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(H, b, rcond=None)[0]

        cost_before = chi(T)
        accepted = False
        step = dx
        for _ in range(6):  # full step plus up to 5 halvings
            T_new = boxplus(T, step)
            cost_after = chi(T_new)
            if cost_after < cost_before:
                T = T_new
                cost_trace.append((cost_before, cost_after))
                final_cost = cost_after
                accepted = True
                break
            step = 0.5 * step
        annealing = iters <= params.anneal_iters
        if not accepted:
            final_cost = cost_before
            if annealing:
                continue  # scales still shrinking; retry at the next level
            converged = True
            break
        if not annealing and np.linalg.norm(step) < params.convergence_eps:
            converged = True
            break

    dist, _ = prior.tree.query(apply_transform(T, scan), k=1,
                               distance_upper_bound=params.inlier_dist)
    inlier_fraction = float(np.isfinite(dist).mean())
    return PoseEstimate(
        transform=T,
        iterations=iters,
        final_cost=final_cost,
        inlier_fraction=inlier_fraction,
        converged=converged,
        cost_trace=cost_trace,
    )


def localize(scan: np.ndarray, prior: PriorMap, T0: np.ndarray,
             params: RegistrationParams = RegistrationParams()) -> PoseEstimate:
    """Registration gated by the inlier fraction; the accepted transform is
    published as the fixed map-to-odometry anchor for the mission layer."""
    try:
        est = robust_register(scan, prior, T0, params)
    except NoCorrespondences as e:
        raise LocalizationRejected(f"no usable correspondences: {e}") from e
    if est.inlier_fraction < params.min_inlier_fraction:
        raise LocalizationRejected(
            f"inlier fraction {est.inlier_fraction:.3f} below "
            f"{params.min_inlier_fraction}"
        )
    return est


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    return math.acos(min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0)))

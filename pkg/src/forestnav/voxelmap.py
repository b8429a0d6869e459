"""Sparse probabilistic voxel map: occupancy and traversability log-odds.

Voxels live in 8^3 blocks held in a hash-indexed directory; only touched
blocks exist. Each scan is integrated as one batch: per-voxel deltas are
summed first and applied once, so endpoint accumulation is insensitive to
point order within a scan, and a scan is atomic with respect to readers.
"""

from __future__ import annotations

import io
import json
import math
import threading
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CorruptFile, VersionMismatch

SNAPSHOT_MAGIC = b"FNVOXM01"
BLOCK = 8  # voxels per block edge


@dataclass(frozen=True)
class MapConfig:
    voxel_size: float = 0.2        # m
    extent: float = 60.0           # m, radius of the maintained region
    hit_increment: float = 0.85    # log-odds per endpoint
    miss_increment: float = -0.4   # log-odds per traversal
    l_max: float = 10.0            # symmetric log-odds clamp
    trav_clamp: float = 2.0        # per-update clamp on traversability logits
    t_stale: int = 50              # ticks without update before decay applies
    decay_rate: float = 0.2        # log-odds moved toward zero per decay call

    def __post_init__(self):
        if self.voxel_size <= 0 or self.extent <= 0:
            raise ValueError("voxel_size and extent must be positive")
        if self.hit_increment <= 0 or self.miss_increment >= 0:
            raise ValueError("hit_increment > 0 and miss_increment < 0 required")


@dataclass(frozen=True)
class ClassifiedPoint:
    """Map-frame point with the classifier's raw traversability logit."""

    position: tuple[float, float, float]
    trav_logit: float


def traversability_probability(l):
    """p = 1 - 1 / (1 + exp l); exact form of the stored-logit readout."""
    return 1.0 - 1.0 / (1.0 + np.exp(l))


def raycast_cells(origin, endpoint, voxel_size: float):
    """Ordered voxel indices whose interior the segment crosses.

    Amanatides-Woo traversal from the origin's voxel up to and including
    the endpoint's voxel. Origin and endpoint must differ.
    """
    o = np.asarray(origin, dtype=float)
    e = np.asarray(endpoint, dtype=float)
    d = e - o
    if not np.any(d != 0.0):
        raise ValueError("raycast requires origin != endpoint")
    cur = np.floor(o / voxel_size).astype(np.int64)
    end = np.floor(e / voxel_size).astype(np.int64)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(d != 0.0, voxel_size / np.abs(d), np.inf)
        next_boundary = (cur + (step > 0)) * voxel_size
        t_max = np.where(d != 0.0, (next_boundary - o) / d, np.inf)
    out = [tuple(cur)]
    guard = int(np.abs(end - cur).sum()) + 3
    for _ in range(guard):
        if np.all(cur == end):
            break
        axis = int(np.argmin(t_max))
        cur = cur.copy()
        cur[axis] += step[axis]
        t_max[axis] += t_delta[axis]
        out.append(tuple(cur))
    return out


def _raycast_batch(origins: np.ndarray, ends: np.ndarray, voxel_size: float):
    """Traversed voxels for many segments, excluding each endpoint voxel.

    Returns an (M, 3) int64 array of visited voxel indices (origin voxels
    included, endpoint voxels excluded), concatenated over all rays.
    """
    o = np.asarray(origins, dtype=float)
    e = np.asarray(ends, dtype=float)
    d = e - o
    cur = np.floor(o / voxel_size).astype(np.int64)
    end = np.floor(e / voxel_size).astype(np.int64)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(d != 0.0, voxel_size / np.abs(d), np.inf)
        next_boundary = (cur + (step > 0)) * voxel_size
        t_max = np.where(d != 0.0, (next_boundary - o) / d, np.inf)

    active = np.any(cur != end, axis=1)
    chunks = [cur[active]]  # origin voxels of rays that will traverse
    cur = cur.copy()
    max_iters = int(np.abs(end - cur).sum(axis=1).max()) + 3 if len(cur) else 0
    for _ in range(max_iters):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        axis = np.argmin(t_max[idx], axis=1)
        cur[idx, axis] += step[idx, axis]
        t_max[idx, axis] += t_delta[idx, axis]
        still = np.any(cur[idx] != end[idx], axis=1)
        active[idx] = still
        if still.any():
            chunks.append(cur[idx[still]])
    if not chunks:
        return np.empty((0, 3), dtype=np.int64)
    return np.vstack(chunks)


_P_OFF = 1 << 20
_P_K = 1 << 21


def pack_voxels(idx: np.ndarray) -> np.ndarray:
    i = np.asarray(idx, dtype=np.int64)
    return ((i[:, 0] + _P_OFF) * _P_K + (i[:, 1] + _P_OFF)) * _P_K + (i[:, 2] + _P_OFF)


def unpack_voxels(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    iz = k % _P_K - _P_OFF
    k = k // _P_K
    iy = k % _P_K - _P_OFF
    ix = k // _P_K - _P_OFF
    return np.stack([ix, iy, iz], axis=1)


class _Block:
    __slots__ = ("l_occ", "l_trav", "tick", "obs")

    def __init__(self):
        self.l_occ = np.zeros((BLOCK, BLOCK, BLOCK), dtype=np.float64)
        self.l_trav = np.zeros((BLOCK, BLOCK, BLOCK), dtype=np.float64)
        self.tick = np.full((BLOCK, BLOCK, BLOCK), -1, dtype=np.int64)
        self.obs = np.zeros((BLOCK, BLOCK, BLOCK), dtype=np.int32)


class TraversabilityMap:
    """Sparse voxel map with per-voxel occupancy and traversability beliefs.

    Thread model: one writer (integrate_scan / decay_dynamic), any number of
    readers; a lock makes each scan integration atomic for readers.
    """

    def __init__(self, config: MapConfig = MapConfig()):
        self.config = config
        self.blocks: dict[tuple, _Block] = {}
        self.tick = 0
        self.skipped_points = 0  # out-of-extent points, diagnostics
        self._lock = threading.RLock()

    def __len__(self) -> int:
        with self._lock:
            return int(sum((b.tick >= 0).sum() for b in self.blocks.values()))

    def _apply(self, keys: np.ndarray, occ_delta: np.ndarray, trav_delta: np.ndarray):
        """Add per-voxel deltas, clamp, stamp the update tick."""
        idx = unpack_voxels(keys)
        bidx = idx >> 3
        local = idx & 7
        bkeys = pack_voxels(bidx)
        order = np.argsort(bkeys, kind="stable")
        bkeys, idx, local = bkeys[order], idx[order], local[order]
        occ_delta, trav_delta = occ_delta[order], trav_delta[order]
        uniq, starts = np.unique(bkeys, return_index=True)
        starts = np.append(starts, len(bkeys))
        lm = self.config.l_max
        for u, lo, hi in zip(unpack_voxels(uniq), starts[:-1], starts[1:]):
            blk = self.blocks.get(tuple(u))
            if blk is None:
                blk = self.blocks[tuple(u)] = _Block()
            lx, ly, lz = local[lo:hi, 0], local[lo:hi, 1], local[lo:hi, 2]
            blk.l_occ[lx, ly, lz] = np.clip(blk.l_occ[lx, ly, lz] + occ_delta[lo:hi], -lm, lm)
            blk.l_trav[lx, ly, lz] = np.clip(blk.l_trav[lx, ly, lz] + trav_delta[lo:hi], -lm, lm)
            blk.tick[lx, ly, lz] = self.tick
            blk.obs[lx, ly, lz] += 1

    def integrate_scan(self, origin, positions, trav_logits=None) -> int:
        """Fuse one labeled scan; returns the number of integrated points.

        `positions` is (N, 3) in the map frame (or a list of
        ClassifiedPoint); endpoint voxels take the hit increment plus the
        point's clamped traversability logit, voxels traversed by each ray
        (endpoint excluded) take the miss increment.
        """
        if trav_logits is None and len(positions) and isinstance(positions[0], ClassifiedPoint):
            trav_logits = np.array([p.trav_logit for p in positions])
            positions = np.array([p.position for p in positions])
        pts = np.asarray(positions, dtype=float).reshape(-1, 3)
        logits = (np.zeros(len(pts)) if trav_logits is None
                  else np.asarray(trav_logits, dtype=float).reshape(-1))
        origin = np.asarray(origin, dtype=float)
        cfg = self.config

        keep = np.all(np.isfinite(pts), axis=1)
        keep &= np.linalg.norm(pts - origin, axis=1) <= cfg.extent
        keep &= np.any(pts != origin, axis=1)
        with self._lock:
            self.tick += 1
            self.skipped_points += int((~keep).sum())
            pts, logits = pts[keep], logits[keep]
            if not len(pts):
                return 0

            vs = cfg.voxel_size
            hit_keys = pack_voxels(np.floor(pts / vs).astype(np.int64))
            miss_keys = pack_voxels(_raycast_batch(np.tile(origin, (len(pts), 1)), pts, vs))

            keys = np.concatenate([hit_keys, miss_keys])
            occ = np.concatenate([
                np.full(len(hit_keys), cfg.hit_increment),
                np.full(len(miss_keys), cfg.miss_increment),
            ])
            trav = np.concatenate([
                np.clip(logits, -cfg.trav_clamp, cfg.trav_clamp),
                np.zeros(len(miss_keys)),
            ])
            uniq, inv = np.unique(keys, return_inverse=True)
            occ_sum = np.zeros(len(uniq))
            trav_sum = np.zeros(len(uniq))
            np.add.at(occ_sum, inv, occ)
            np.add.at(trav_sum, inv, trav)
            self._apply(uniq, occ_sum, trav_sum)
            return int(len(pts))

    def decay_dynamic(self, current_tick: int | None = None) -> int:
        """Move stale voxels' occupancy toward zero; returns voxels decayed."""
        cfg = self.config
        n = 0
        with self._lock:
            tick = self.tick if current_tick is None else current_tick
            for blk in self.blocks.values():
                stale = (blk.tick >= 0) & (tick - blk.tick >= cfg.t_stale) & (blk.l_occ != 0.0)
                if not stale.any():
                    continue
                l = blk.l_occ[stale]
                blk.l_occ[stale] = np.sign(l) * np.maximum(np.abs(l) - cfg.decay_rate, 0.0)
                n += int(stale.sum())
        return n

    def _gather(self, lo=None, hi=None, with_obs: bool = False):
        """All stored voxels (optionally boxed): indices, l_occ, l_trav arrays."""
        idx_parts, occ_parts, trav_parts, obs_parts = [], [], [], []
        vs = self.config.voxel_size
        if lo is not None:
            blo = tuple(int(v) >> 3 for v in np.floor(np.asarray(lo) / vs).astype(np.int64))
            bhi = tuple(int(v) >> 3 for v in np.floor(np.asarray(hi) / vs).astype(np.int64))
        for bkey, blk in self.blocks.items():
            if lo is not None and not (
                blo[0] <= bkey[0] <= bhi[0]
                and blo[1] <= bkey[1] <= bhi[1]
                and blo[2] <= bkey[2] <= bhi[2]
            ):
                continue
            mask = blk.tick >= 0
            if not mask.any():
                continue
            lx, ly, lz = np.nonzero(mask)
            idx = np.stack([lx, ly, lz], axis=1) + np.asarray(bkey) * BLOCK
            idx_parts.append(idx)
            occ_parts.append(blk.l_occ[mask])
            trav_parts.append(blk.l_trav[mask])
            if with_obs:
                obs_parts.append(blk.obs[mask])
        if not idx_parts:
            z = np.empty((0, 3), np.int64)
            out = (z, np.empty(0), np.empty(0))
            return out + (np.empty(0, np.int32),) if with_obs else out
        out = (np.vstack(idx_parts), np.concatenate(occ_parts), np.concatenate(trav_parts))
        if with_obs:
            return out + (np.concatenate(obs_parts),)
        return out

    def query_region(self, lo, hi, with_obs: bool = False):
        """Stored voxels inside the box: (centers (N,3), p_occ, p_trav[, obs])."""
        with self._lock:
            parts = self._gather(lo, hi, with_obs)
        idx, l_occ, l_trav = parts[:3]
        vs = self.config.voxel_size
        centers = (idx + 0.5) * vs
        inside = np.all((centers >= np.asarray(lo)) & (centers <= np.asarray(hi)), axis=1)
        out = (
            centers[inside],
            traversability_probability(l_occ[inside]),
            traversability_probability(l_trav[inside]),
        )
        if with_obs:
            return out + (parts[3][inside],)
        return out

    def query_occupied(self, lo, hi):
        """Occupied voxels (p_occ > 0.5) in the box: (centers, p_trav)."""
        centers, p_occ, p_trav = self.query_region(lo, hi)
        sel = p_occ > 0.5
        return centers[sel], p_trav[sel]

    # Snapshot container -------------------------------------------------

    def to_bytes(self) -> bytes:
        with self._lock:
            idx, l_occ, l_trav, obs = self._gather(with_obs=True)
            ticks = np.concatenate(
                [blk.tick[blk.tick >= 0] for blk in self.blocks.values()]
            ) if self.blocks else np.empty(0, np.int64)
            header = {
                "format": "forestnav-voxmap",
                "version": 1,
                "config": asdict(self.config),
                "tick": self.tick,
                "count": int(len(idx)),
            }
        head = json.dumps(header, sort_keys=True).encode()
        out = io.BytesIO()
        out.write(SNAPSHOT_MAGIC)
        out.write(len(head).to_bytes(8, "little"))
        out.write(head)
        for arr, dtype in ((idx, "<i8"), (l_occ, "<f8"), (l_trav, "<f8"),
                           (ticks, "<i8"), (obs, "<i4")):
            out.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TraversabilityMap":
        if blob[: len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
            raise CorruptFile("bad magic")
        try:
            head_len = int.from_bytes(blob[8:16], "little")
            header = json.loads(blob[16: 16 + head_len])
        except (ValueError, UnicodeDecodeError) as e:
            raise CorruptFile(f"unreadable header: {e}") from e
        if header.get("version") != 1:
            raise VersionMismatch(f"snapshot version {header.get('version')}")
        n = header["count"]
        body = blob[16 + head_len:]
        need = n * 24 + n * 8 + n * 8 + n * 8 + n * 4
        if len(body) < need:
            raise CorruptFile("truncated snapshot payload")
        idx = np.frombuffer(body[: n * 24], dtype="<i8").reshape(n, 3)
        l_occ = np.frombuffer(body[n * 24: n * 32], dtype="<f8")
        l_trav = np.frombuffer(body[n * 32: n * 40], dtype="<f8")
        ticks = np.frombuffer(body[n * 40: n * 48], dtype="<i8")
        obs = np.frombuffer(body[n * 48: n * 48 + n * 4], dtype="<i4")
        m = cls(MapConfig(**header["config"]))
        m.tick = header["tick"]
        bidx = idx >> 3
        local = idx & 7
        for i in range(n):
            bkey = tuple(bidx[i])
            blk = m.blocks.get(bkey)
            if blk is None:
                blk = m.blocks[bkey] = _Block()
            lx, ly, lz = local[i]
            blk.l_occ[lx, ly, lz] = l_occ[i]
            blk.l_trav[lx, ly, lz] = l_trav[i]
            blk.tick[lx, ly, lz] = ticks[i]
            blk.obs[lx, ly, lz] = obs[i]
        return m

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TraversabilityMap":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def export_text(self, path) -> int:
        """Debug dump: one `x y z p_occ p_trav` line per stored voxel."""
        with self._lock:
            idx, l_occ, l_trav = self._gather()
        vs = self.config.voxel_size
        centers = (idx + 0.5) * vs
        p_occ = traversability_probability(l_occ)
        p_trav = traversability_probability(l_trav)
        with open(path, "w") as f:
            for (x, y, z), po, pt in zip(centers, p_occ, p_trav):
                f.write(f"{x:.3f} {y:.3f} {z:.3f} {po:.6f} {pt:.6f}\n")
        return len(centers)

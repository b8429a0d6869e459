"""Voxel map tests: ray traversal, log-odds fusion, queries, decay, snapshot."""

import math

import numpy as np
import pytest

from forestnav.errors import CorruptFile
from forestnav.voxelmap import (
    ClassifiedPoint,
    MapConfig,
    TraversabilityMap,
    pack_voxels,
    raycast_cells,
    traversability_probability,
    unpack_voxels,
)


def _bisect_chain(o, d, t0, t1, c0, c1, vs, depth=0):
    """Cells strictly between samples at t0 and t1, ordered, by bisection."""
    if depth > 48 or np.abs(c1 - c0).sum() <= 1:
        return []
    tm = 0.5 * (t0 + t1)
    cm = np.floor((o + tm * d) / vs).astype(np.int64)
    left = _bisect_chain(o, d, t0, tm, c0, cm, vs, depth + 1)
    mid = [] if (np.array_equal(cm, c0) or np.array_equal(cm, c1)) else [tuple(cm)]
    right = _bisect_chain(o, d, tm, t1, cm, c1, vs, depth + 1)
    return left + mid + right


def marching_oracle(origin, endpoint, voxel_size, step=1e-3):
    """Brute-force ray marching at 1 mm, bisecting any multi-axis jump so
    corner-cut voxels with sub-millimeter chords are not missed."""
    o = np.asarray(origin, float)
    e = np.asarray(endpoint, float)
    d = e - o
    n = max(2, int(np.linalg.norm(d) / step))
    ts = np.linspace(0.0, 1.0, n)
    cells = np.floor((o + ts[:, None] * d) / voxel_size).astype(np.int64)
    out = [tuple(cells[0])]
    for i in range(1, n):
        prev, cur = cells[i - 1], cells[i]
        if tuple(cur) == out[-1]:
            continue
        for c in _bisect_chain(o, d, ts[i - 1], ts[i], prev, cur, voxel_size):
            if c != out[-1]:
                out.append(c)
        if tuple(cur) != out[-1]:
            out.append(tuple(cur))
    return out


def test_probability_equation_values():
    assert traversability_probability(0.0) == pytest.approx(0.5)
    assert traversability_probability(math.log(4.0)) == pytest.approx(0.8)
    assert traversability_probability(-math.log(4.0)) == pytest.approx(0.2)


def test_probability_equation_machine_precision():
    ls = np.linspace(-10.0, 10.0, 2001)
    direct = 1.0 - 1.0 / (1.0 + np.exp(ls))
    assert np.array_equal(traversability_probability(ls), direct)
    assert np.all((direct > 0.0) & (direct < 1.0))


def test_pack_unpack_roundtrip():
    rng = np.random.default_rng(0)
    idx = rng.integers(-500, 500, size=(1000, 3))
    assert np.array_equal(unpack_voxels(pack_voxels(idx)), idx)


def test_raycast_axis_aligned():
    # From a voxel center, 1 m along +x with 0.2 m voxels: six voxels
    # including start and end (boundary landing per floor convention).
    cells = raycast_cells((0.1, 0.1, 0.1), (1.1, 0.1, 0.1), 0.2)
    assert cells == marching_oracle((0.1, 0.1, 0.1), (1.1, 0.1, 0.1), 0.2)
    assert len(cells) == 6


def test_raycast_degenerate_rejected():
    with pytest.raises(ValueError):
        raycast_cells((1.0, 2.0, 3.0), (1.0, 2.0, 3.0), 0.2)


def test_raycast_matches_marching_oracle_random():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        o = rng.uniform(-3, 3, 3)
        e = o + rng.uniform(-4, 4, 3)
        if np.all(o == e):
            continue
        got = raycast_cells(o, e, 0.2)
        ref = marching_oracle(o, e, 0.2)
        assert got == ref, (o, e)


def test_integrate_single_point_against_marching_oracle():
    m = TraversabilityMap()
    origin = (0.1, 0.1, 0.1)
    point = (1.1, 0.1, 0.1)
    m.integrate_scan(origin, np.array([point]), np.array([2.0]))
    cfg = m.config
    visited = marching_oracle(origin, point, cfg.voxel_size)
    endpoint = visited[-1]
    for cell in visited[:-1]:
        assert occ_logit(m, cell) == pytest.approx(cfg.miss_increment)
    assert occ_logit(m, endpoint) == pytest.approx(cfg.hit_increment)
    assert trav_logit(m, endpoint) == pytest.approx(2.0)
    # Four voxels strictly between origin's and endpoint's.
    assert len(visited[1:-1]) == 4


def occ_logit(m: TraversabilityMap, cell) -> float:
    blk = m.blocks.get(tuple(np.asarray(cell) >> 3))
    if blk is None:
        return 0.0
    lx, ly, lz = np.asarray(cell) & 7
    return float(blk.l_occ[lx, ly, lz])


def trav_logit(m: TraversabilityMap, cell) -> float:
    blk = m.blocks.get(tuple(np.asarray(cell) >> 3))
    lx, ly, lz = np.asarray(cell) & 7
    return float(blk.l_trav[lx, ly, lz])


def test_repeated_hits_accumulate_and_clamp():
    m = TraversabilityMap()
    cell_center = (1.0 + 0.1, 0.1, 0.1)
    for k in range(1, 16):
        m.integrate_scan((0.1, 0.1, 0.1), np.array([cell_center]))
        expected = min(k * m.config.hit_increment, m.config.l_max)
        assert occ_logit(m, (5, 0, 0)) == pytest.approx(expected)


def test_ray_through_hit_voxel_reduces_belief():
    m = TraversabilityMap()
    m.integrate_scan((0.1, 0.1, 0.1), np.array([[1.1, 0.1, 0.1]]))
    before = occ_logit(m, (5, 0, 0))
    # A longer ray passes through the previously hit voxel.
    m.integrate_scan((0.1, 0.1, 0.1), np.array([[2.3, 0.1, 0.1]]))
    after = occ_logit(m, (5, 0, 0))
    assert after == pytest.approx(before + m.config.miss_increment)


def test_scan_order_insensitive():
    rng = np.random.default_rng(9)
    pts = rng.uniform(-5, 5, (200, 3))
    logits = rng.uniform(-2, 2, 200)
    m1 = TraversabilityMap()
    m1.integrate_scan((0.0, 0.0, 0.5), pts, logits)
    perm = rng.permutation(200)
    m2 = TraversabilityMap()
    m2.integrate_scan((0.0, 0.0, 0.5), pts[perm], logits[perm])
    c1, o1, t1 = m1.query_region((-6, -6, -6), (6, 6, 6))
    c2, o2, t2 = m2.query_region((-6, -6, -6), (6, 6, 6))
    k1, k2 = np.lexsort(c1.T), np.lexsort(c2.T)
    assert np.array_equal(c1[k1], c2[k2])
    assert np.array_equal(o1[k1], o2[k2])
    assert np.array_equal(t1[k1], t2[k2])


def test_out_of_extent_points_skipped():
    m = TraversabilityMap(MapConfig(extent=10.0))
    n = m.integrate_scan((0, 0, 0), np.array([[50.0, 0, 0], [1.0, 0, 0]]))
    assert n == 1
    assert m.skipped_points == 1


def test_query_occupied_empty_map():
    m = TraversabilityMap()
    centers, p = m.query_occupied((-5, -5, -5), (5, 5, 5))
    assert len(centers) == 0


def test_query_occupied_single_hit():
    m = TraversabilityMap()
    m.integrate_scan((0.1, 0.1, 0.1), np.array([[1.1, 0.1, 0.1]]), np.array([1.0]))
    centers, p_trav = m.query_occupied((0.5, -1, -1), (2, 1, 1))
    assert len(centers) == 1
    assert centers[0] == pytest.approx([1.1, 0.1, 0.1])
    assert p_trav[0] == pytest.approx(traversability_probability(1.0))


def test_query_matches_exhaustive_scan():
    rng = np.random.default_rng(3)
    m = TraversabilityMap()
    for _ in range(10):
        pts = rng.uniform(-8, 8, (100, 3))
        m.integrate_scan(rng.uniform(-1, 1, 3), pts, rng.uniform(-2, 2, 100))
    lo, hi = (-4, -4, -4), (4, 4, 4)
    centers, p_trav = m.query_occupied(lo, hi)
    got = {tuple(np.round(c, 6)) for c in centers}
    # Exhaustive reference over every stored voxel.
    expect = set()
    vs = m.config.voxel_size
    for bkey, blk in m.blocks.items():
        for lx in range(8):
            for ly in range(8):
                for lz in range(8):
                    if blk.tick[lx, ly, lz] < 0:
                        continue
                    idx = np.array(bkey) * 8 + (lx, ly, lz)
                    c = (idx + 0.5) * vs
                    if np.all(c >= lo) and np.all(c <= hi) and blk.l_occ[lx, ly, lz] > 0:
                        expect.add(tuple(np.round(c, 6)))
    assert got == expect


def test_decay_dynamic_boundaries():
    cfg = MapConfig(t_stale=5, decay_rate=0.3)
    m = TraversabilityMap(cfg)
    m.integrate_scan((0.1, 0.1, 0.1), np.array([[1.1, 0.1, 0.1]]))
    l0 = occ_logit(m, (5, 0, 0))
    m.tick += cfg.t_stale - 1
    assert m.decay_dynamic() == 0  # one tick short of stale
    m.tick += 1
    decayed = m.decay_dynamic()
    assert decayed > 0
    assert occ_logit(m, (5, 0, 0)) == pytest.approx(l0 - 0.3)


def test_transient_object_cleared():
    """A walker seen for 5 scans then gone: rays through its voxel plus decay
    push occupancy below 0.5 within 20 clearing scans."""
    m = TraversabilityMap(MapConfig(t_stale=10, decay_rate=0.2))
    origin = (0.1, 0.1, 0.5)
    walker = np.array([[3.05, 0.1, 0.5]])
    wall = np.array([[6.05, 0.1, 0.5]])
    for _ in range(5):
        m.integrate_scan(origin, walker)
    wcell = tuple(np.floor(np.asarray(walker[0]) / 0.2).astype(int))
    assert traversability_probability(occ_logit(m, wcell)) > 0.5
    cleared_at = None
    for k in range(1, 21):
        m.integrate_scan(origin, wall)  # rays now pass through the voxel
        m.decay_dynamic()
        if traversability_probability(occ_logit(m, wcell)) < 0.5 and cleared_at is None:
            cleared_at = k
    assert cleared_at is not None and cleared_at <= 20


def test_fusion_reduces_classification_error():
    """Noisy per-scan logits (eps = 0.15) fused over 20 scans classify voxels
    (threshold 0.8) strictly better than any single scan."""
    rng = np.random.default_rng(17)
    n_voxels = 400
    # Half traversable ground (true logit +2), half blocking stems (-2).
    truth = np.array([True] * (n_voxels // 2) + [False] * (n_voxels // 2))
    centers = np.zeros((n_voxels, 3))
    centers[:, 0] = (np.arange(n_voxels) + 0.5) * 0.2
    centers[:, 1] = 10.0  # away from the shared sensor origin
    centers[:, 2] = 0.1
    origin = (-5.0, 10.0, 0.1)

    def scan_logits():
        flip = rng.uniform(size=n_voxels) < 0.15
        base = np.where(truth, 2.0, -2.0)
        return np.where(flip, -base, base)

    fused = TraversabilityMap()
    single_errors = []
    for _ in range(20):
        logits = scan_logits()
        fused.integrate_scan(origin, centers, logits)
        single = TraversabilityMap()
        single.integrate_scan(origin, centers, logits)
        single_errors.append(classification_error(single, centers, truth))
    fused_error = classification_error(fused, centers, truth)
    assert fused_error < min(single_errors)
    assert fused_error == 0.0


def classification_error(m: TraversabilityMap, centers, truth) -> float:
    lo = centers.min(axis=0) - 1
    hi = centers.max(axis=0) + 1
    got_centers, _, p_trav = m.query_region(lo, hi)
    lookup = {tuple(np.floor(c / 0.2).astype(int)): p for c, p in zip(got_centers, p_trav)}
    wrong = 0
    for c, is_trav in zip(centers, truth):
        key = tuple(np.floor(c / 0.2).astype(int))
        pred = lookup.get(key, 0.0) > 0.8
        wrong += pred != is_trav
    return wrong / len(centers)


def test_snapshot_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    m = TraversabilityMap()
    for _ in range(5):
        m.integrate_scan(rng.uniform(-1, 1, 3), rng.uniform(-6, 6, (80, 3)), rng.uniform(-2, 2, 80))
    blob = m.to_bytes()
    m2 = TraversabilityMap.from_bytes(blob)
    assert m2.to_bytes() == blob
    c1, o1, t1 = m.query_region((-9, -9, -9), (9, 9, 9))
    c2, o2, t2 = m2.query_region((-9, -9, -9), (9, 9, 9))
    assert np.array_equal(c1, c2) and np.array_equal(o1, o2) and np.array_equal(t1, t2)
    with pytest.raises(CorruptFile):
        TraversabilityMap.from_bytes(blob[: len(blob) - 40])
    path = tmp_path / "map.bin"
    m.save(path)
    assert TraversabilityMap.load(path).to_bytes() == blob


def test_export_text(tmp_path):
    m = TraversabilityMap()
    m.integrate_scan((0.1, 0.1, 0.1), np.array([[1.1, 0.1, 0.1]]), np.array([1.5]))
    path = tmp_path / "map.txt"
    n = m.export_text(path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == n
    parts = [float(v) for v in lines[-1].split()]
    assert len(parts) == 5


def test_classified_point_interface():
    m = TraversabilityMap()
    pts = [ClassifiedPoint((1.1, 0.1, 0.1), 1.0), ClassifiedPoint((2.1, 0.3, 0.1), -1.0)]
    assert m.integrate_scan((0.1, 0.1, 0.1), pts) == 2

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import synthetic_scan
from rangeseg.errors import ConfigError, DegeneratePointError, DimensionError
from rangeseg.projection import (
    BeamTable, ProjectionIndex, assign_beam, assign_beams, azimuth_column, flatten, flatten_vjp,
    project, spherical_coords, unflatten, unflatten_vjp,
)
from rangeseg.scan_io import RawScan


def _point_at(elev, az=0.0, r=10.0):
    return np.array([r * math.cos(elev) * math.cos(az), r * math.cos(elev) * math.sin(az), r * math.sin(elev)])


def test_fov_boundaries(kitti):
    table = BeamTable.uniform(kitti)
    assert assign_beam(_point_at(kitti.fov_up), table) == 0
    assert assign_beam(_point_at(kitti.fov_down), table) == kitti.num_beams - 1


def test_nearest_beam_exhaustive(rng, kitti):
    table = BeamTable.uniform(kitti)
    elev = rng.uniform(kitti.fov_down - 0.05, kitti.fov_up + 0.05, 10_000)
    xyz = np.stack([np.cos(elev), np.zeros_like(elev), np.sin(elev)], axis=1) * 20.0
    got = assign_beams(xyz, table)
    measured = np.arctan2(xyz[:, 2], np.hypot(xyz[:, 0], xyz[:, 1]))
    dist = np.abs(measured[:, None] - table.elevations[None, :])
    assert np.all(dist[np.arange(len(got)), got] <= dist.min(axis=1))


def test_nearest_beam_with_offsets(rng):
    table = BeamTable(np.radians([2.0, 0.0, -2.0, -4.0]), np.array([0.1, 0.05, 0.0, -0.05]))
    xyz = rng.normal(0, 10, (2000, 3))
    got = assign_beams(xyz, table)
    rho = np.hypot(xyz[:, 0], xyz[:, 1])
    for i in range(len(xyz)):
        d = [abs(math.atan2(xyz[i, 2] - h, rho[i]) - e) for e, h in zip(table.elevations, table.offsets)]
        assert d[got[i]] == min(d)


def test_beam_origin_point_is_degenerate(kitti):
    with pytest.raises(DegeneratePointError):
        assign_beam(np.zeros(3), BeamTable.uniform(kitti))


def test_beam_table_validation(tmp_path):
    with pytest.raises(ConfigError):
        BeamTable(np.array([0.0, 0.1]), np.zeros(2))
    p = tmp_path / "beams.txt"
    p.write_text("# elev off\n2.0 0.1\n-1.0 0.0\n")
    t = BeamTable.load(p)
    np.testing.assert_allclose(t.elevations, np.radians([2.0, -1.0]))
    np.testing.assert_allclose(t.offsets, [0.1, 0.0])


def test_spherical_examples():
    assert spherical_coords((1, 0, 0), 0.0) == (1.0, 0.0)
    assert spherical_coords((0, 0, 2), 2.0)[0] == 0.0
    r, a = spherical_coords((3, 4, 0), 0.0)
    assert r == 5.0 and a == math.atan2(4, 3)


def test_azimuth_columns(kitti):
    table = BeamTable.uniform(kitti)
    idx = project(RawScan(np.array([[1, 0, 0, 0], [0, -1, 0, 0]], np.float32)), table, kitti)
    assert idx.u.tolist() == [512, 256]
    assert azimuth_column(np.array([math.pi]), 1024).tolist() == [1023]
    assert azimuth_column(np.array([-math.pi]), 1024).tolist() == [0]


def test_inverse_mapping_within_one_column(rng, kitti):
    scan = synthetic_scan(rng, 3000, kitti)
    idx = project(scan, BeamTable.uniform(kitti), kitti)
    w = kitti.width
    center = (idx.u + 0.5) / w * 2 * math.pi - math.pi
    alpha = np.arctan2(scan.points[:, 1].astype(np.float64), scan.points[:, 0])
    assert np.all(np.abs(center - alpha) <= 2 * math.pi / w)


def test_partition_property(rng, kitti):
    idx = project(synthetic_scan(rng, 4096, kitti), BeamTable.uniform(kitti), kitti)
    cells = idx.cells()
    members = [i for m in cells.values() for i in m]
    assert sorted(members) == list(range(4096))
    for (v, u), m in cells.items():
        assert np.all(idx.v[m] == v) and np.all(idx.u[m] == u)
    assert idx.occupancy().sum() == 4096


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 300))
def test_grid_bounds_any_scan(seed, n):
    from rangeseg.scan_io import builtin_config

    cfg = builtin_config("nuscenes")
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 20, (n, 4)).astype(np.float32)
    idx = project(RawScan(pts), BeamTable.uniform(cfg), cfg)
    assert np.all((idx.u >= 0) & (idx.u < cfg.width) & (idx.v >= 0) & (idx.v < cfg.num_beams))
    assert idx.counts.sum() == n


def test_degenerate_and_out_of_fov_counted(kitti):
    pts = np.array([[0, 0, 0, 1], [10, 0, 10, 1], [10, 0, 0, 1]], np.float32)
    idx = project(RawScan(pts), BeamTable.uniform(kitti), kitti)
    assert idx.degenerate == 1 and idx.r[0] == 0.0
    assert idx.out_of_fov == 1 and idx.v[1] == 0


def test_empty_scan_projects(kitti):
    idx = project(RawScan(np.zeros((0, 4), np.float32)), BeamTable.uniform(kitti), kitti)
    assert idx.num_points == 0 and idx.num_groups == 0


def test_index_is_read_only(kitti):
    idx = ProjectionIndex([0, 1], [0, 0], (2, 2))
    with pytest.raises(ValueError):
        idx.u[0] = 1


def _naive_mean(feat, idx):
    h, w = idx.shape
    out = np.zeros((h, w, feat.shape[1]))
    for v in range(h):
        for u in range(w):
            rows = [i for i in range(idx.num_points) if idx.v[i] == v and idx.u[i] == u]
            if rows:
                out[v, u] = sum(feat[i].astype(np.float64) for i in rows) / len(rows)
    return out


def test_flatten_mean_naive(rng):
    idx = ProjectionIndex(rng.integers(0, 5, 60), rng.integers(0, 3, 60), (3, 5))
    feat = rng.normal(size=(60, 4))
    np.testing.assert_allclose(flatten(feat, idx), _naive_mean(feat, idx), atol=1e-12)


def test_flatten_max_naive(rng):
    idx = ProjectionIndex(rng.integers(0, 5, 40), rng.integers(0, 3, 40), (3, 5))
    feat = rng.normal(size=(40, 2))
    out = flatten(feat, idx, "max")
    for (v, u), m in idx.cells().items():
        np.testing.assert_array_equal(out[v, u], feat[m].max(axis=0))
    assert np.all(out[idx.occupancy() == 0] == 0)


def test_singleton_roundtrip(rng):
    cells = rng.permutation(6 * 7)[:20]
    idx = ProjectionIndex(cells % 7, cells // 7, (6, 7))
    feat = rng.normal(size=(20, 3)).astype(np.float32)
    img = flatten(feat, idx)
    np.testing.assert_array_equal(unflatten(img, idx), feat)
    for i in range(20):
        np.testing.assert_array_equal(img[idx.v[i], idx.u[i]], feat[i])


def test_empty_index_flatten():
    idx = ProjectionIndex([], [], (3, 4))
    img = flatten(np.zeros((0, 5)), idx)
    assert img.shape == (3, 4, 5) and not img.any()


def test_constant_image_gather(rng):
    idx = ProjectionIndex(rng.integers(0, 4, 30), rng.integers(0, 4, 30), (4, 4))
    out = unflatten(np.full((4, 4, 3), 2.5), idx)
    assert out.shape == (30, 3) and np.all(out == 2.5)


def test_gather_then_max_idempotent(rng):
    idx = ProjectionIndex(rng.integers(0, 4, 30), rng.integers(0, 4, 30), (4, 4))
    img = rng.normal(size=(4, 4, 3))
    back = flatten(unflatten(img, idx), idx, "max")
    occ = idx.occupancy() > 0
    np.testing.assert_array_equal(back[occ], img[occ])
    np.testing.assert_array_equal(flatten(unflatten(back, idx), idx, "max"), back)


def test_flatten_mean_permutation_invariant(rng):
    u, v = rng.integers(0, 5, 50), rng.integers(0, 3, 50)
    feat = rng.normal(size=(50, 3))
    perm = rng.permutation(50)
    a = flatten(feat, ProjectionIndex(u, v, (3, 5)))
    b = flatten(feat[perm], ProjectionIndex(u[perm], v[perm], (3, 5)))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_shape_mismatch_raises():
    idx = ProjectionIndex([0], [0], (2, 2))
    with pytest.raises(DimensionError):
        flatten(np.zeros((2, 3)), idx)
    with pytest.raises(DimensionError):
        unflatten(np.zeros((3, 2, 1)), idx)


def test_flatten_unflatten_adjoint(rng):
    """The pullbacks are the transposes of the forward linear maps."""
    idx = ProjectionIndex(rng.integers(0, 4, 25), rng.integers(0, 3, 25), (3, 4))
    x = rng.normal(size=(25, 2))
    g = rng.normal(size=(3, 4, 2))
    y, back = flatten_vjp(x, idx, "mean")
    assert np.isclose((y * g).sum(), (x * back(g)).sum())
    img = rng.normal(size=(3, 4, 2))
    gp = rng.normal(size=(25, 2))
    z, back = unflatten_vjp(img, idx)
    assert np.isclose((z * gp).sum(), (img * back(gp)).sum())


def test_coarsen_maps_to_stride_cells():
    idx = ProjectionIndex([0, 3, 5], [0, 1, 3], (4, 6))
    c = idx.coarsen((2, 3))
    assert c.u.tolist() == [0, 1, 2] and c.v.tolist() == [0, 0, 1]
    assert idx.coarsen((4, 6)) is idx

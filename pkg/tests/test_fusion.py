import numpy as np
import pytest

import oracles
from helpers import identity_params
from rangeseg import fusion
from rangeseg.checks import random_params, run_suite
from rangeseg.errors import DimensionError
from rangeseg.projection import ProjectionIndex

C = 4


@pytest.fixture
def params(rng):
    return random_params(fusion.param_shapes("f", C, C, C), rng)


def test_zero_query_gives_uniform_attention(rng, params):
    p = dict(params)
    p["f.query.weight"] = np.zeros((1, C))
    p["f.query.bias"] = np.zeros(C)
    fg, fp = rng.normal(size=(2, 6, C))
    depth = rng.uniform(1, 10, (6, 1))
    wg, wp = fusion.attention_weights(fg, fp, depth, p, "f")
    np.testing.assert_allclose(wg, 1 / C)
    np.testing.assert_allclose(wp, 1 / C)
    vg = fg @ p["f.value_g.weight"] + p["f.value_g.bias"]
    vp = fp @ p["f.value_p.weight"] + p["f.value_p.bias"]
    expect = ((vg + vp) / C) @ p["f.out.weight"] + p["f.out.bias"]
    np.testing.assert_allclose(fusion.depth_attention(fg, fp, depth, p, "f"), expect, atol=1e-12)


def test_tied_maps_symmetry(rng, params):
    p = dict(params)
    for a, b in (("key_p", "key_g"), ("value_p", "value_g")):
        p[f"f.{a}.weight"] = p[f"f.{b}.weight"]
        p[f"f.{a}.bias"] = p[f"f.{b}.bias"]
    x = rng.normal(size=(5, C))
    depth = rng.uniform(1, 10, (5, 1))
    wg, wp = fusion.attention_weights(x, x, depth, p, "f")
    np.testing.assert_array_equal(wg, wp)
    v = x @ p["f.value_g.weight"] + p["f.value_g.bias"]
    expect = (2 * wg * v) @ p["f.out.weight"] + p["f.out.bias"]
    np.testing.assert_allclose(fusion.depth_attention(x, x, depth, p, "f"), expect, atol=1e-12)


def test_attention_weights_are_distributions(rng, params):
    fg, fp = rng.normal(0, 3, (2, 50, C))
    wg, wp = fusion.attention_weights(fg, fp, rng.uniform(0, 80, 50), params, "f")
    for w in (wg, wp):
        assert np.all(w > 0) and np.abs(w.sum(axis=1) - 1).max() < 1e-6


def test_attention_row_local(rng, params):
    fg, fp = rng.normal(size=(2, 9, C))
    depth = rng.uniform(1, 10, (9, 1))
    perm = rng.permutation(9)
    a = fusion.depth_attention(fg, fp, depth, params, "f")
    b = fusion.depth_attention(fg[perm], fp[perm], depth[perm], params, "f")
    np.testing.assert_array_equal(a[perm], b)


def test_attention_row_counts_checked(params):
    with pytest.raises(DimensionError):
        fusion.depth_attention(np.zeros((3, C)), np.zeros((2, C)), np.zeros((3, 1)), params, "f")


def _naive_reproject(fp, fg, idx, p):
    h, w, _ = fg.shape
    mean = oracles.flatten_mean(fp, idx.u, idx.v, (h, w))
    wt = p["f.reproject.weight"][0, 0]
    out = np.zeros((h, w, wt.shape[1]))
    for y in range(h):
        for x in range(w):
            z = np.concatenate([mean[y, x], fg[y, x]]) @ wt
            out[y, x] = oracles.norm_act(z[None], p["f.reproject.norm.scale"], p["f.reproject.norm.shift"],
                                         p["f.reproject.norm.mean"], p["f.reproject.norm.var"])[0]
    return out


def test_reproject_naive(rng, params):
    idx = ProjectionIndex(rng.integers(0, 6, 20), rng.integers(0, 4, 20), (4, 6))
    fp, fg = rng.normal(size=(20, C)), rng.normal(size=(4, 6, C))
    got = fusion.reproject_fuse(fp.astype(np.float32), fg.astype(np.float32), idx,
                                {k: v.astype(np.float32) for k, v in params.items()}, "f")
    assert got.shape == (4, 6, C)
    assert np.abs(got - _naive_reproject(fp, fg, idx, params)).max() < 1e-5


def test_reproject_zero_points_use_image_half(rng, params):
    idx = ProjectionIndex(rng.integers(0, 6, 20), rng.integers(0, 4, 20), (4, 6))
    fg = rng.normal(size=(4, 6, C))
    a = fusion.reproject_fuse(np.zeros((20, C)), fg, idx, params, "f")
    empty = ProjectionIndex([], [], (4, 6))
    b = fusion.reproject_fuse(np.zeros((0, C)), fg, empty, params, "f")
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_reproject_grid_checked(params):
    with pytest.raises(DimensionError):
        fusion.reproject_fuse(np.zeros((1, C)), np.zeros((3, 3, C)), ProjectionIndex([0], [0], (4, 4)), params, "f")


def test_residual_identity_and_gate_range(rng, params):
    base = rng.normal(size=(4, 5, C))
    np.testing.assert_array_equal(fusion.residual_enhance(np.zeros_like(base), base, params, "f"), base)
    fused = rng.normal(0, 3, (4, 5, C))
    gate = fusion.residual_gate(fused, params, "f")
    assert np.all((gate > 0) & (gate < 1))
    diff = fusion.residual_enhance(fused, base, params, "f") - base
    np.testing.assert_allclose(diff, gate * fused, atol=1e-12)
    assert np.array_equal(np.sign(diff), np.sign(gate * fused))


def test_stage_single_point_shapes(rng, params):
    idx = ProjectionIndex([3], [1], (4, 8), r=[5.0])
    fp, fg = fusion.fusion_stage(rng.normal(size=(1, C)), rng.normal(size=(2, 4, C)), idx,
                                 idx.r.reshape(-1, 1), params, "f")
    assert fp.shape == (1, C) and fg.shape == (2, 4, C)
    assert np.isfinite(fp).all() and np.isfinite(fg).all()


def test_stride_two_constant_gather(rng, params):
    """A constant stage map resized to the full grid gathers that constant."""
    idx = ProjectionIndex(rng.integers(0, 8, 12), rng.integers(0, 4, 12), (4, 8), r=rng.uniform(1, 9, 12))
    fg = np.full((2, 4, C), 0.7)
    fp = rng.normal(size=(12, C))
    depth = idx.r.reshape(-1, 1)
    got, _ = fusion.fusion_stage(fp, fg, idx, depth, params, "f")
    expect = fusion.depth_attention(np.full((12, C), 0.7), fp, depth, params, "f")
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_zero_fusion_passes_image_through(rng):
    p = identity_params(fusion.param_shapes("f", C, C, C))
    idx = ProjectionIndex(rng.integers(0, 4, 6), rng.integers(0, 4, 6), (4, 4), r=np.ones(6))
    fg = rng.normal(size=(4, 4, C))
    _, fg_new = fusion.fusion_stage(rng.normal(size=(6, C)), fg, idx, idx.r.reshape(-1, 1), p, "f")
    # zero weights -> fused map is zero -> pure residual
    np.testing.assert_array_equal(fg_new, fg)


@pytest.mark.parametrize("name", ["depth_attention", "reproject_fuse", "residual_enhance", "fusion_stage"])
def test_grad_checks(name):
    [res] = run_suite(only={name})
    assert res.error < 1e-4, (res.worst_tensor, res.error)

"""Global-local point encoding: per-point descriptors and group aggregation.

Every point gets a 10-dim descriptor: its raw ``(x, y, z, I, depth)`` plus
its offset from the mean of the same five quantities over its cell.  A
two-layer MLP embeds descriptors to ``C`` channels (the point features);
per cell, max- and mean-pooled point features are concatenated, passed
through ``linear + relu`` and placed into the pseudo-image (the group
features).
"""

from __future__ import annotations

import numpy as np

from . import layers
from . import tensor_core as tc
from .errors import EmptyGroupError
from .projection import ProjectionIndex, flatten_vjp
from .scan_io import RawScan

DESCRIPTOR_DIM = 10


def param_shapes(channels: int) -> layers.Shapes:
    return {
        **layers.mlp_shapes("encoder.embed", DESCRIPTOR_DIM, channels, channels),
        **layers.linear_shapes("encoder.agg", 2 * channels, channels),
    }


def _five(scan: RawScan, index: ProjectionIndex) -> np.ndarray:
    pts = scan.points.astype(np.float64)
    return np.column_stack([pts, index.r])


def group_center(scan: RawScan, index: ProjectionIndex, cell: tuple[int, int]) -> np.ndarray:
    """Mean ``(x, y, z, I, depth)`` over the points of cell ``(v, u)``."""
    v, u = cell
    cid = v * index.shape[1] + u
    seg = np.searchsorted(index.cell_ids, cid)
    if seg >= index.num_groups or index.cell_ids[seg] != cid:
        raise EmptyGroupError(f"cell {cell} holds no points")
    s, c = index.starts[seg], index.counts[seg]
    members = index.order[s : s + c]
    return _five(scan, index)[members].mean(axis=0)


def encode_points(scan: RawScan, index: ProjectionIndex) -> np.ndarray:
    """``N x 10`` descriptors, computed in float64."""
    five = _five(scan, index)
    if index.num_points == 0:
        return np.zeros((0, DESCRIPTOR_DIM))
    sums = np.add.reduceat(five[index.order], index.starts, axis=0)
    centers = sums / index.counts[:, None]
    per_point = np.empty_like(five)
    per_point[index.order] = centers[index.segment]
    return np.hstack([five, five - per_point])


def embed_points_vjp(features, p):
    return layers.mlp_vjp(features, p, "encoder.embed")


def embed_points(features, p) -> np.ndarray:
    return embed_points_vjp(features, p)[0]


def aggregate_groups_vjp(fp0, index: ProjectionIndex, p):
    fp0 = np.asarray(fp0)
    h, w = index.shape
    c = fp0.shape[1]
    mx, mx_back = flatten_vjp(fp0, index, "max")
    av, av_back = flatten_vjp(fp0, index, "mean")
    ids = index.cell_ids
    cat = np.hstack([mx.reshape(-1, c)[ids], av.reshape(-1, c)[ids]])
    z, lin_back = layers.linear_vjp(cat, p, "encoder.agg")
    rows, act_back = tc.relu_vjp(z)
    cout = rows.shape[1]
    out = np.zeros((h * w, cout), dtype=rows.dtype)
    out[ids] = rows

    def pullback(g):
        grows = np.asarray(g).reshape(h * w, cout)[ids]
        gcat, grads = lin_back(act_back(grows))
        gmx = np.zeros((h * w, c), dtype=gcat.dtype)
        gav = np.zeros((h * w, c), dtype=gcat.dtype)
        gmx[ids] = gcat[:, :c]
        gav[ids] = gcat[:, c:]
        gx = mx_back(gmx.reshape(h, w, c)) + av_back(gav.reshape(h, w, c))
        return gx, grads

    return out.reshape(h, w, cout), pullback


def aggregate_groups(fp0, index: ProjectionIndex, p) -> np.ndarray:
    return aggregate_groups_vjp(fp0, index, p)[0]

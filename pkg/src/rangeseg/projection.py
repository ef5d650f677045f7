"""Beam-grouped spherical projection and the point/image scatter-gather bridges.

Each point is assigned to a laser beam (image row ``v``) and an azimuth
column ``u``.  Points sharing a ``(v, u)`` cell form one group; the groups
partition the scan.  :func:`flatten` scatters per-point features into an
``H x W x C`` pseudo-image and :func:`unflatten` gathers them back.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegeneratePointError, DimensionError
from .scan_io import DatasetConfig, RawScan


@dataclass(frozen=True, eq=False)
class BeamTable:
    """Per-beam elevation (radians) and vertical offset (meters), top row first."""

    elevations: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        elev = np.asarray(self.elevations, dtype=np.float64).reshape(-1)
        offs = np.asarray(self.offsets, dtype=np.float64).reshape(-1)
        if elev.size == 0:
            raise ConfigError("beam table is empty")
        if offs.shape != elev.shape:
            raise ConfigError("beam table needs one offset per elevation")
        if elev.size > 1 and not np.all(np.diff(elev) < 0):
            raise ConfigError("beam elevations must decrease strictly from row 0")
        object.__setattr__(self, "elevations", elev)
        object.__setattr__(self, "offsets", offs)

    def __len__(self) -> int:
        return self.elevations.size

    @classmethod
    def uniform(cls, cfg: DatasetConfig) -> "BeamTable":
        h = cfg.num_beams
        if h == 1:
            elev = np.array([0.5 * (cfg.fov_up + cfg.fov_down)])
        else:
            elev = np.linspace(cfg.fov_up, cfg.fov_down, h)
        return cls(elev, np.zeros(h))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BeamTable":
        """Read ``elevation_deg vertical_offset_m`` lines, top row first."""
        rows = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                elev_deg, off = line.split()
                rows.append((math.radians(float(elev_deg)), float(off)))
        if not rows:
            raise ConfigError(f"{path}: no beams")
        elev, offs = zip(*rows)
        return cls(np.array(elev), np.array(offs))


def spherical_coords(point, h: float) -> tuple[float, float]:
    x, y, z = (float(c) for c in point[:3])
    r = math.sqrt(x * x + y * y + (z - h) ** 2)
    return r, math.atan2(y, x)


def _nearest_beam_uniform(elev: np.ndarray, beams: np.ndarray) -> np.ndarray:
    n = len(beams)
    if n == 1:
        return np.zeros(elev.shape, dtype=np.int64)
    # beams decrease with row; asc[i] == beams[n - 1 - i]
    asc = beams[::-1]
    k = np.clip(np.searchsorted(asc, elev), 1, n - 1)
    upper = n - 1 - k
    lower = upper + 1
    d_upper = np.abs(elev - beams[upper])
    d_lower = np.abs(elev - beams[lower])
    return np.where(d_lower < d_upper, lower, upper).astype(np.int64)


def assign_beams(xyz: np.ndarray, table: BeamTable) -> np.ndarray:
    """Vectorised beam assignment: the row whose elevation is nearest.

    The elevation of a point is measured from each beam's own origin
    ``(0, 0, h_l)``; ties go to the lower row index.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    rho = np.hypot(xyz[:, 0], xyz[:, 1])
    offs = table.offsets
    if np.all(offs == offs[0]):
        elev = np.arctan2(xyz[:, 2] - offs[0], rho)
        return _nearest_beam_uniform(elev, table.elevations)
    best = np.empty(len(xyz), dtype=np.int64)
    chunk = 8192
    for s in range(0, len(xyz), chunk):
        z = xyz[s : s + chunk, 2:3]
        elev = np.arctan2(z - offs[None, :], rho[s : s + chunk, None])
        best[s : s + chunk] = np.argmin(np.abs(elev - table.elevations[None, :]), axis=1)
    return best


def assign_beam(point, table: BeamTable) -> int:
    x, y, z = (float(c) for c in point[:3])
    if x == 0.0 and y == 0.0 and np.any(z == table.offsets):
        raise DegeneratePointError(f"point {(x, y, z)} coincides with a beam origin")
    return int(assign_beams(np.array([[x, y, z]]), table)[0])


def azimuth_column(alpha: np.ndarray, width: int) -> np.ndarray:
    u = np.floor((alpha + np.pi) / (2.0 * np.pi) * width).astype(np.int64)
    return np.clip(u, 0, width - 1)


class ProjectionIndex:
    """Point-to-cell assignment for one scan at one grid resolution.

    Points are grouped by flat cell id ``v * W + u``.  ``order`` lists point
    indices sorted by cell (stable, so members keep scan order inside a
    cell), and ``starts`` marks where each non-empty cell begins in it.
    All per-cell reductions walk ``order`` so results never depend on
    scheduling.
    """

    def __init__(self, u, v, shape, r=None, alpha=None, degenerate=0, out_of_fov=0):
        self.u = np.array(u, dtype=np.int64).reshape(-1)
        self.v = np.array(v, dtype=np.int64).reshape(-1)
        self.shape = (int(shape[0]), int(shape[1]))
        h, w = self.shape
        n = self.u.size
        if self.v.size != n:
            raise DimensionError("u and v must have the same length")
        if n and (self.u.min() < 0 or self.u.max() >= w or self.v.min() < 0 or self.v.max() >= h):
            raise DimensionError(f"cell coordinates fall outside the {h}x{w} grid")
        self.r = np.zeros(n) if r is None else np.array(r, dtype=np.float64)
        self.alpha = np.zeros(n) if alpha is None else np.array(alpha, dtype=np.float64)
        self.degenerate = int(degenerate)
        self.out_of_fov = int(out_of_fov)

        self.cell = self.v * w + self.u
        self.order = np.argsort(self.cell, kind="stable")
        sorted_cells = self.cell[self.order]
        if n:
            first = np.flatnonzero(np.r_[True, sorted_cells[1:] != sorted_cells[:-1]])
        else:
            first = np.zeros(0, dtype=np.int64)
        self.starts = first
        self.cell_ids = sorted_cells[first]
        self.counts = np.diff(np.r_[first, n]).astype(np.int64)
        # segment number of each entry of ``order``
        self.segment = np.repeat(np.arange(first.size), self.counts)
        for arr in (self.u, self.v, self.r, self.alpha, self.cell, self.order,
                    self.starts, self.cell_ids, self.counts, self.segment):
            arr.flags.writeable = False

    @property
    def num_points(self) -> int:
        return self.u.size

    @property
    def num_groups(self) -> int:
        """M, the number of non-empty cells."""
        return self.cell_ids.size

    def cells(self) -> dict[tuple[int, int], list[int]]:
        w = self.shape[1]
        out = {}
        for cid, s, c in zip(self.cell_ids, self.starts, self.counts):
            out[(int(cid // w), int(cid % w))] = self.order[s : s + c].tolist()
        return out

    def occupancy(self) -> np.ndarray:
        h, w = self.shape
        grid = np.zeros(h * w, dtype=np.int64)
        grid[self.cell_ids] = self.counts
        return grid.reshape(h, w)

    def coarsen(self, shape) -> "ProjectionIndex":
        """Re-index onto a downsampled grid of ``shape``.

        A fine cell ``(v, u)`` maps to ``(v // sh, u // sw)`` where the strides
        are the integer ratios ``ceil(H / h)`` and ``ceil(W / w)``.
        """
        h, w = int(shape[0]), int(shape[1])
        if (h, w) == self.shape:
            return self
        sh = -(-self.shape[0] // h)
        sw = -(-self.shape[1] // w)
        return ProjectionIndex(
            np.minimum(self.u // sw, w - 1),
            np.minimum(self.v // sh, h - 1),
            (h, w),
            self.r,
            self.alpha,
            self.degenerate,
            self.out_of_fov,
        )


def project(scan: RawScan, table: BeamTable, cfg: DatasetConfig) -> ProjectionIndex:
    h, w = cfg.resolution
    if len(table) != h:
        raise ConfigError(f"beam table has {len(table)} rows, config expects {h}")
    xyz = scan.xyz.astype(np.float64)
    n = xyz.shape[0]
    if n == 0:
        return ProjectionIndex(np.zeros(0), np.zeros(0), (h, w))
    v = assign_beams(xyz, table)
    hl = table.offsets[v]
    r = np.sqrt(xyz[:, 0] ** 2 + xyz[:, 1] ** 2 + (xyz[:, 2] - hl) ** 2)
    alpha = np.arctan2(xyz[:, 1], xyz[:, 0])
    degenerate = (xyz[:, 0] == 0) & (xyz[:, 1] == 0) & (r == 0)
    alpha[degenerate] = 0.0
    rho = np.hypot(xyz[:, 0], xyz[:, 1])
    elev = np.arctan2(xyz[:, 2] - hl, rho)
    half_step = 0.0 if h == 1 else 0.5 * (cfg.fov_up - cfg.fov_down) / (h - 1)
    outside = ((elev > cfg.fov_up + half_step) | (elev < cfg.fov_down - half_step)) & ~degenerate
    u = azimuth_column(alpha, w)
    return ProjectionIndex(u, v, (h, w), r, alpha, int(degenerate.sum()), int(outside.sum()))


def _check_rows(features: np.ndarray, index: ProjectionIndex):
    if features.ndim != 2 or features.shape[0] != index.num_points:
        raise DimensionError(
            f"feature matrix {features.shape} does not match {index.num_points} indexed points"
        )


def flatten(features: np.ndarray, index: ProjectionIndex, reduce: str = "mean") -> np.ndarray:
    """Scatter ``N x C`` point features into an ``H x W x C`` image."""
    return flatten_vjp(features, index, reduce)[0]


def flatten_vjp(features, index: ProjectionIndex, reduce: str = "mean"):
    features = np.asarray(features)
    _check_rows(features, index)
    h, w = index.shape
    c = features.shape[1]
    out = np.zeros((h * w, c), dtype=features.dtype)
    if index.num_points == 0:
        return out.reshape(h, w, c), lambda g: np.zeros_like(features)
    ordered = features[index.order]
    if reduce == "mean":
        counts = index.counts.astype(features.dtype)[:, None]
        out[index.cell_ids] = np.add.reduceat(ordered, index.starts, axis=0) / counts
        per_point = np.empty(index.num_points, dtype=np.int64)
        per_point[index.order] = index.counts[index.segment]

        def pullback(g):
            g = np.asarray(g).reshape(h * w, c)
            return g[index.cell] / per_point[:, None].astype(g.dtype)

    elif reduce == "max":
        peak = np.maximum.reduceat(ordered, index.starts, axis=0)
        out[index.cell_ids] = peak
        # first member attaining the max receives the gradient
        pos = np.arange(ordered.shape[0])[:, None]
        hit = np.where(ordered == peak[index.segment], pos, ordered.shape[0])
        winner = np.minimum.reduceat(hit, index.starts, axis=0)

        def pullback(g):
            g = np.asarray(g).reshape(h * w, c)
            gsorted = np.zeros((ordered.shape[0], c), dtype=g.dtype)
            cols = np.broadcast_to(np.arange(c), winner.shape)
            gsorted[winner, cols] = g[index.cell_ids]
            gx = np.empty_like(gsorted)
            gx[index.order] = gsorted
            return gx

    else:
        raise ValueError(f"unknown reduction {reduce!r}")
    return out.reshape(h, w, c), pullback


def unflatten(image: np.ndarray, index: ProjectionIndex) -> np.ndarray:
    """Gather each point's cell value out of an ``H x W x C`` image."""
    return unflatten_vjp(image, index)[0]


def unflatten_vjp(image, index: ProjectionIndex):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[:2] != index.shape:
        raise DimensionError(f"image {image.shape} does not match index resolution {index.shape}")
    h, w, c = image.shape
    out = image[index.v, index.u]

    def pullback(g):
        g = np.asarray(g)
        gimg = np.zeros((h * w, c), dtype=g.dtype)
        if index.num_points:
            gimg[index.cell_ids] = np.add.reduceat(g[index.order], index.starts, axis=0)
        return gimg.reshape(h, w, c)

    return out, pullback

"""Scan and label I/O plus per-dataset geometry configuration.

On-disk conventions (SemanticKITTI):

* ``.bin``: consecutive little-endian float32 quadruples ``(x, y, z, intensity)``.
* ``.label``: consecutive little-endian uint32; the semantic id is the low
  16 bits, the instance id (high 16 bits) is discarded.
* remap table: UTF-8 text, one ``raw_id class_id`` pair per line, ``#``
  starts a comment.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import MalformedLabelError, MalformedScanError, UnknownDatasetError, ConfigError

SCAN_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
IGNORE_ID = 255


@dataclass(frozen=True, eq=False)
class RawScan:
    """N LiDAR returns.

    Attributes:
        points: ``(N, 4)`` float32 array of ``x, y, z, intensity``.
        labels: optional ``(N,)`` integer array (raw or class ids, depending
            on where it came from).
    """

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 4:
            if pts.size == 0:
                pts = pts.reshape(0, 4)
            else:
                raise MalformedScanError(f"points must have shape (N, 4), got {pts.shape}")
        bad = ~np.isfinite(pts).all(axis=1)
        if bad.any():
            raise MalformedScanError(f"non-finite value at point {int(np.flatnonzero(bad)[0])}")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (len(pts),):
                raise MalformedLabelError(
                    f"expected {len(pts)} labels, got {labels.shape[0] if labels.ndim else 0}"
                )
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def permuted(self, perm: np.ndarray) -> "RawScan":
        labels = None if self.labels is None else self.labels[perm]
        return RawScan(self.points[perm], labels)


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    num_beams: int
    width: int
    fov_up: float  # radians
    fov_down: float  # radians
    num_classes: int
    label_remap: Mapping[int, int] = field(default_factory=dict, repr=False)
    ignore_id: int = IGNORE_ID
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.num_beams < 1 or self.width < 1:
            raise ConfigError(f"resolution must be positive, got {self.num_beams}x{self.width}")
        if not self.fov_down < self.fov_up:
            raise ConfigError("fov_down must be below fov_up")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        for raw, cls in self.label_remap.items():
            if not (0 <= cls < self.num_classes or cls == self.ignore_id):
                raise ConfigError(f"remap target {cls} for raw id {raw} is out of range")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.num_beams, self.width


SEMANTICKITTI_CLASSES = (
    "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person",
    "bicyclist", "motorcyclist", "road", "parking", "sidewalk",
    "other-ground", "building", "fence", "vegetation", "trunk", "terrain",
    "pole", "traffic-sign",
)

NUSCENES_CLASSES = (
    "barrier", "bicycle", "bus", "car", "construction-vehicle", "motorcycle",
    "pedestrian", "traffic-cone", "trailer", "truck", "driveable-surface",
    "other-flat", "sidewalk", "terrain", "manmade", "vegetation",
)


def parse_kitti_scan(data: bytes) -> RawScan:
    if len(data) % 16:
        raise MalformedScanError(f"scan length {len(data)} is not a multiple of 16 bytes")
    pts = np.frombuffer(data, dtype=SCAN_DTYPE).reshape(-1, 4).astype(np.float32)
    return RawScan(pts)


def encode_kitti_scan(scan: RawScan) -> bytes:
    return np.ascontiguousarray(scan.points, dtype=SCAN_DTYPE).tobytes()


def parse_kitti_labels(data: bytes) -> np.ndarray:
    """Return the semantic (low 16 bit) ids of a ``.label`` payload."""
    if len(data) % 4:
        raise MalformedLabelError(f"label length {len(data)} is not a multiple of 4 bytes")
    raw = np.frombuffer(data, dtype=LABEL_DTYPE)
    return (raw & 0xFFFF).astype(np.uint32)


def encode_labels(ids: np.ndarray) -> bytes:
    return np.ascontiguousarray(ids, dtype=LABEL_DTYPE).tobytes()


def read_scan(path: str | os.PathLike) -> RawScan:
    path = Path(path)
    if path.suffix == ".txt" or path.suffix == ".xyzil":
        return load_xyzil(path)
    return parse_kitti_scan(path.read_bytes())


def read_labels(path: str | os.PathLike) -> np.ndarray:
    return parse_kitti_labels(Path(path).read_bytes())


def load_xyzil(path: str | os.PathLike) -> RawScan:
    """Load a whitespace-separated ``x y z intensity label`` text file.

    The label column is optional; a file with four columns yields an
    unlabeled scan.
    """
    rows = np.loadtxt(path, dtype=np.float64, comments="#", ndmin=2)
    if rows.size == 0:
        return RawScan(np.zeros((0, 4), np.float32))
    if rows.shape[1] not in (4, 5):
        raise MalformedScanError(f"{path}: expected 4 or 5 columns, got {rows.shape[1]}")
    labels = rows[:, 4].astype(np.int64) if rows.shape[1] == 5 else None
    return RawScan(rows[:, :4].astype(np.float32), labels)


def parse_remap_table(text: str) -> dict[int, int]:
    table: dict[int, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"remap line {lineno}: expected 'raw_id class_id', got {line!r}")
        table[int(parts[0])] = int(parts[1])
    return table


def load_remap_table(path: str | os.PathLike) -> dict[int, int]:
    return parse_remap_table(Path(path).read_text(encoding="utf-8"))


def remap_labels(raw: np.ndarray, cfg: DatasetConfig) -> np.ndarray:
    """Map raw ids to class ids; anything not in the table becomes ``ignore_id``."""
    raw = np.asarray(raw, dtype=np.int64)
    out = np.full(raw.shape, cfg.ignore_id, dtype=np.int64)
    if not cfg.label_remap or raw.size == 0:
        return out
    keys = np.fromiter(cfg.label_remap.keys(), dtype=np.int64)
    vals = np.fromiter(cfg.label_remap.values(), dtype=np.int64)
    order = np.argsort(keys)
    keys, vals = keys[order], vals[order]
    pos = np.clip(np.searchsorted(keys, raw), 0, len(keys) - 1)
    hit = keys[pos] == raw
    out[hit] = vals[pos[hit]]
    return out


def _bundled_table(name: str) -> dict[int, int]:
    text = resources.files("rangeseg").joinpath("data").joinpath(name).read_text(encoding="utf-8")
    return parse_remap_table(text)


def builtin_config(name: str) -> DatasetConfig:
    key = name.lower()
    if key == "semantickitti":
        return DatasetConfig(
            name="semantickitti",
            num_beams=64,
            width=1024,
            fov_up=math.radians(3.0),
            fov_down=math.radians(-25.0),
            num_classes=19,
            label_remap=_bundled_table("semantickitti_remap.txt"),
            class_names=SEMANTICKITTI_CLASSES,
        )
    if key == "nuscenes":
        return DatasetConfig(
            name="nuscenes",
            num_beams=32,
            width=1024,
            fov_up=math.radians(10.0),
            fov_down=math.radians(-30.0),
            num_classes=16,
            label_remap=_bundled_table("nuscenes_remap.txt"),
            class_names=NUSCENES_CLASSES,
        )
    raise UnknownDatasetError(f"unknown dataset {name!r} (expected semantickitti or nuscenes)")

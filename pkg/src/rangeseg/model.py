"""Parameter storage, model configuration and the end-to-end forward pass.

Weights file layout (all integers little-endian)::

    b"DAGW"                     magic
    uint32                      format version (1)
    uint64                      tensor count
    per tensor:
        uint32 + bytes          UTF-8 name
        uint32                  ndim
        uint64 * ndim           extents
        float32 * prod(extents) data, row-major
"""

from __future__ import annotations

import io
import os
import struct
import time
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from . import backbone, encoder, fusion, head, layers
from .errors import ConfigError, FormatError, ParamMismatchError, RangeSegError
from .projection import BeamTable, project
from .scan_io import DatasetConfig, RawScan, builtin_config

MAGIC = b"DAGW"
FORMAT_VERSION = 1


class ParamStore(Mapping):
    """Ordered, read-only map from parameter name to array."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._t: dict[str, np.ndarray] = {}
        for name, arr in (tensors or {}).items():
            arr = np.array(arr)
            arr.flags.writeable = False
            self._t[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def __repr__(self) -> str:
        return f"ParamStore({len(self)} tensors, {self.num_parameters()} parameters)"

    @property
    def dtype(self):
        return next(iter(self._t.values())).dtype if self._t else np.dtype(np.float32)

    def num_parameters(self, learnable_only: bool = True) -> int:
        return sum(a.size for n, a in self._t.items() if not (learnable_only and layers.is_buffer(n)))

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({n: a.astype(dtype) for n, a in self._t.items()})

    def replace(self, **updates) -> "ParamStore":
        t = dict(self._t)
        t.update(updates)
        return ParamStore(t)

    def identical(self, other: "ParamStore") -> bool:
        """Bit-exact equality of names, order, dtypes, shapes and data."""
        if list(self) != list(other):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.values(), other.values())
        )


def _widths_for(channels: int, stages: int) -> tuple[int, ...]:
    return tuple(channels * min(2 ** i, 4) for i in range(stages))


def _strides_for(stages: int) -> tuple[int, ...]:
    return (1,) + (2,) * (stages - 1)


@dataclass(frozen=True)
class ModelConfig:
    """Every knob of the network.

    ``widths`` default to ``C, 2C, 4C, 4C, ...`` and ``strides`` to
    ``1, 2, 2, ...``; ``attn_channels`` defaults to ``C``.
    """

    dataset: str = "semantickitti"
    channels: int = 128
    depths: tuple[int, ...] = (3, 4, 6, 3)
    widths: tuple[int, ...] | None = None
    strides: tuple[int, ...] | None = None
    attn_channels: int | None = None
    seed: int = 0
    beam_table: str | None = None
    _dataset_cfg: DatasetConfig | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        depths = tuple(int(d) for d in self.depths)
        object.__setattr__(self, "depths", depths)
        if self.widths is None:
            object.__setattr__(self, "widths", _widths_for(self.channels, len(depths)))
        if self.strides is None:
            object.__setattr__(self, "strides", _strides_for(len(depths)))
        if self.attn_channels is None:
            object.__setattr__(self, "attn_channels", self.channels)
        if self.channels < 1 or self.attn_channels < 1:
            raise ConfigError("C and C_a must be positive")
        self.backbone  # validates depth/width/stride tuples
        if self._dataset_cfg is None:
            object.__setattr__(self, "_dataset_cfg", builtin_config(self.dataset))

    @property
    def backbone(self) -> backbone.BackboneConfig:
        return backbone.BackboneConfig(self.depths, self.widths, self.strides)

    @property
    def dataset_config(self) -> DatasetConfig:
        return self._dataset_cfg

    @property
    def num_classes(self) -> int:
        return self.dataset_config.num_classes

    def with_dataset(self, dataset_cfg: DatasetConfig) -> "ModelConfig":
        return replace(self, dataset=dataset_cfg.name, _dataset_cfg=dataset_cfg)

    def beams(self) -> BeamTable:
        if self.beam_table:
            return BeamTable.load(self.beam_table)
        return BeamTable.uniform(self.dataset_config)

    # -- key=value files ---------------------------------------------------

    _KEYS = ("dataset", "C", "depths", "widths", "strides", "C_a", "seed", "beam_table")

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ModelConfig":
        raw: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in cls._KEYS:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
            raw[key] = value

        def ints(s):
            return tuple(int(v) for v in s.replace("[", "").replace("]", "").split(",") if v.strip())

        kwargs = {}
        try:
            if "dataset" in raw:
                kwargs["dataset"] = raw["dataset"]
            if "C" in raw:
                kwargs["channels"] = int(raw["C"])
            for key in ("depths", "widths", "strides"):
                if key in raw:
                    kwargs[key] = ints(raw[key])
            if "C_a" in raw:
                kwargs["attn_channels"] = int(raw["C_a"])
            if "seed" in raw:
                kwargs["seed"] = int(raw["seed"])
        except ValueError as exc:
            raise ConfigError(f"bad config value: {exc}") from None
        if raw.get("beam_table"):
            kwargs["beam_table"] = raw["beam_table"]
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | os.PathLike, **overrides) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)

    def to_text(self) -> str:
        lines = [
            f"dataset={self.dataset}",
            f"C={self.channels}",
            f"depths={','.join(map(str, self.depths))}",
            f"widths={','.join(map(str, self.widths))}",
            f"strides={','.join(map(str, self.strides))}",
            f"C_a={self.attn_channels}",
            f"seed={self.seed}",
        ]
        if self.beam_table:
            lines.append(f"beam_table={self.beam_table}")
        return "\n".join(lines) + "\n"


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = cfg.channels
    bb = cfg.backbone
    shapes = dict(encoder.param_shapes(c))
    shapes.update(backbone.param_shapes(bb, c))
    for i, w in enumerate(bb.widths):
        shapes.update(fusion.param_shapes(f"fusion{i}", w, c, cfg.attn_channels))
    shapes.update(head.param_shapes(bb.num_stages, c, bb.widths, cfg.num_classes))
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for n, s in param_shapes(cfg).items() if not layers.is_buffer(n))


def _fans(shape) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = int(np.prod(shape[:-2]))
    return receptive * shape[-2], receptive * shape[-1]


def init_params(cfg: ModelConfig, seed: int | None = None) -> ParamStore:
    """Weights ~ U(+-sqrt(6 / (fan_in + fan_out))), biases and shifts zero,
    norm scale 1, running mean 0, running var 1."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight"):
            fan_in, fan_out = _fans(shape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        elif name.endswith((".scale", ".var")):
            tensors[name] = np.ones(shape, np.float32)
        else:
            tensors[name] = np.zeros(shape, np.float32)
    return ParamStore(tensors)


def check_store(cfg: ModelConfig, store: Mapping[str, np.ndarray]) -> None:
    """Raise ParamMismatchError naming the first tensor that disagrees with ``cfg``."""
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in store:
            raise ParamMismatchError(name, "missing from weights")
        if tuple(store[name].shape) != tuple(shape):
            raise ParamMismatchError(name, f"shape {tuple(store[name].shape)} != expected {tuple(shape)}")
    for name in store:
        if name not in expected:
            raise ParamMismatchError(name, "not used by this config")


# -- weights file ------------------------------------------------------------

def dump_weights(store: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(store)))
    for name, arr in store.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_weights(store: Mapping[str, np.ndarray], sink: str | os.PathLike | BinaryIO) -> None:
    data = dump_weights(store)
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        Path(sink).write_bytes(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated weights file while reading {what} at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_weights(data: bytes) -> ParamStore:
    r = _Reader(bytes(data))
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not a DAGW weights file")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported weights format version {version}")
    (count,) = r.unpack("<Q", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = r.unpack("<I", f"name length of tensor {i}")
        try:
            name = r.take(nlen, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor {i} name is not valid UTF-8") from None
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        (ndim,) = r.unpack("<I", f"ndim of {name}")
        shape = r.unpack(f"<{ndim}Q", f"extents of {name}")
        if any(e == 0 for e in shape):
            raise FormatError(f"tensor {name!r} has a zero extent {shape}")
        size = int(np.prod(shape, dtype=np.int64))
        if size * 4 > len(r.data) - r.pos:
            raise FormatError(f"truncated weights file while reading data of {name!r}")
        arr = np.frombuffer(r.take(size * 4, f"data of {name}"), dtype="<f4").reshape(shape)
        if not np.isfinite(arr).all():
            raise FormatError(f"tensor {name!r} holds non-finite values")
        tensors[name] = arr.astype(np.float32)
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after the last tensor")
    return ParamStore(tensors)


def load_weights(source: str | os.PathLike | BinaryIO | bytes) -> ParamStore:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return parse_weights(bytes(source))
    if hasattr(source, "read"):
        return parse_weights(source.read())
    return parse_weights(Path(source).read_bytes())


# -- forward -----------------------------------------------------------------

class ForwardError(RangeSegError):
    def __init__(self, stage: str, exc: Exception):
        self.stage = stage
        super().__init__(f"{stage}: {type(exc).__name__}: {exc}")


@dataclass
class Diagnostics:
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)
    num_points: int = 0
    num_groups: int = 0
    empty_cells: int = 0
    degenerate_points: int = 0
    out_of_fov_points: int = 0
    wall_time: float = 0.0


@dataclass
class ForwardResult:
    scores: np.ndarray
    labels: np.ndarray
    diagnostics: Diagnostics


def canonical_order(points: np.ndarray) -> np.ndarray:
    """A point ordering that depends only on point values, not input order."""
    pts = np.asarray(points)
    return np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0]))


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, exc, tb):
        if exc is not None and isinstance(exc, RangeSegError) and not isinstance(exc, ForwardError):
            raise ForwardError(self.name, exc) from exc
        return False


def forward(scan: RawScan, cfg: ModelConfig, store: Mapping[str, np.ndarray],
            table: BeamTable | None = None) -> ForwardResult:
    """Run the full network on one scan.

    Points are processed in a value-determined canonical order and the
    outputs are scattered back, so permuting the input permutes the output
    rows without changing a single bit.
    """
    t0 = time.perf_counter()
    ds = cfg.dataset_config
    bb = cfg.backbone
    h, w = ds.resolution
    diag = Diagnostics(num_points=len(scan))
    dtype = store[next(iter(store))].dtype if len(store) else np.float32

    with _Stage("projection"):
        canon = canonical_order(scan.points)
        ordered = RawScan(scan.points[canon])
        index = project(ordered, table or cfg.beams(), ds)
    diag.num_groups = index.num_groups
    diag.empty_cells = h * w - index.num_groups
    diag.degenerate_points = index.degenerate
    diag.out_of_fov_points = index.out_of_fov

    with _Stage("encoder"):
        desc = encoder.encode_points(ordered, index).astype(dtype)
        fp0 = encoder.embed_points(desc, store)
        fg = encoder.aggregate_groups(fp0, index, store)
    diag.shapes.update({"descriptors": desc.shape, "F_p0": fp0.shape, "F_g0": fg.shape})

    depth = index.r.astype(dtype)
    fp = fp0
    stage_points, stage_images = [], []
    for i in range(bb.num_stages):
        with _Stage(f"stage{i}"):
            x = backbone.run_stage(i, fg, bb, store)
        with _Stage(f"fusion{i}"):
            fp, fg = fusion.fusion_stage(fp, x, index, depth, store, f"fusion{i}")
        diag.shapes[f"stage{i}"] = x.shape
        diag.shapes[f"F_p{i + 1}"] = fp.shape
        diag.shapes[f"F_g{i + 1}"] = fg.shape
        stage_points.append(fp)
        stage_images.append(fg)

    with _Stage("head"):
        fp_out = head.fuse_point_path(stage_points, store)
        fg_out = head.fuse_image_path(stage_images, (h, w), store)
        scores_c = head.logits(fg_out, fp_out, fp0, index, store)
    diag.shapes.update({"F_p_out": fp_out.shape, "F_g_out": fg_out.shape, "scores": scores_c.shape})

    scores = np.empty_like(scores_c)
    scores[canon] = scores_c
    labels = head.predict(scores)
    diag.wall_time = time.perf_counter() - t0
    return ForwardResult(scores, labels, diag)

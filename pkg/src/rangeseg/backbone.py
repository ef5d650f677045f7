"""Multi-branch 2D feature extractor.

A basic block runs three branches on its input ``x``:

* a 3x3 convolution,
* a 3x3 convolution with dilation 2,
* a 1x1 convolution halving the channels followed by a 3x3 convolution
  restoring them,

each followed by normalization + relu.  The branches are concatenated,
mixed by a 1x1 convolution and added back onto ``x`` before a final relu.
Stages optionally start with a strided 3x3 transition that changes
resolution and width, then stack ``depths[i]`` width-preserving blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from . import tensor_core as tc
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class BackboneConfig:
    depths: tuple[int, ...] = (3, 4, 6, 3)
    widths: tuple[int, ...] = (128, 256, 512, 512)
    strides: tuple[int, ...] = (1, 2, 2, 2)

    def __post_init__(self):
        for name in ("depths", "widths", "strides"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not self.depths:
            raise ConfigError("backbone needs at least one stage")
        if not len(self.depths) == len(self.widths) == len(self.strides):
            raise ConfigError(
                f"depths, widths and strides must have equal length, got "
                f"{len(self.depths)}, {len(self.widths)}, {len(self.strides)}"
            )
        if min(self.depths) < 1:
            raise ConfigError(f"every stage needs at least one block, got depths {list(self.depths)}")
        if min(self.widths) < 1 or min(self.strides) < 1:
            raise ConfigError("widths and strides must be positive")

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_resolutions(self, h: int, w: int) -> list[tuple[int, int]]:
        out = []
        for s in self.strides:
            h = tc.conv_output_size(h, 3, s, 1, 1)
            w = tc.conv_output_size(w, 3, s, 1, 1)
            out.append((h, w))
        return out


def _reduced(width: int) -> int:
    return max(1, width // 2)


def has_transition(i: int, cfg: BackboneConfig, in_width: int) -> bool:
    prev = in_width if i == 0 else cfg.widths[i - 1]
    return cfg.strides[i] != 1 or prev != cfg.widths[i]


def basic_block_shapes(prefix: str, width: int) -> layers.Shapes:
    half = _reduced(width)
    return {
        **layers.conv_norm_shapes(f"{prefix}.local", 3, width, width),
        **layers.conv_norm_shapes(f"{prefix}.dilated", 3, width, width),
        **layers.conv_norm_shapes(f"{prefix}.edge_reduce", 1, width, half),
        **layers.conv_norm_shapes(f"{prefix}.edge", 3, half, width),
        **layers.conv_shapes(f"{prefix}.fuse", 1, 3 * width, width, bias=True),
    }


def param_shapes(cfg: BackboneConfig, in_width: int) -> layers.Shapes:
    shapes: layers.Shapes = {}
    for i, (depth, width) in enumerate(zip(cfg.depths, cfg.widths)):
        prev = in_width if i == 0 else cfg.widths[i - 1]
        if has_transition(i, cfg, in_width):
            shapes.update(layers.conv_norm_shapes(f"stage{i}.down", 3, prev, width))
        for j in range(depth):
            shapes.update(basic_block_shapes(f"stage{i}.block{j}", width))
    return shapes


def basic_block_vjp(x, p, prefix):
    x = np.asarray(x)
    width = p[f"{prefix}.fuse.weight"].shape[3]
    if x.ndim != 3 or x.shape[2] != width:
        raise DimensionError(f"{prefix}: input {x.shape} does not have {width} channels")
    f1, b1 = layers.conv_norm_act_vjp(x, p, f"{prefix}.local", padding=1)
    f2, b2 = layers.conv_norm_act_vjp(x, p, f"{prefix}.dilated", dilation=2, padding=2)
    r, b3a = layers.conv_norm_act_vjp(x, p, f"{prefix}.edge_reduce")
    f3, b3b = layers.conv_norm_act_vjp(r, p, f"{prefix}.edge", padding=1)
    cat = np.concatenate([f1, f2, f3], axis=2)
    temp, bfuse = layers.conv_vjp(cat, p, f"{prefix}.fuse")
    y, bact = tc.relu_vjp(temp + x)

    def pullback(g):
        gsum = bact(g)
        gcat, grads = bfuse(gsum)
        g1, g2, g3 = np.split(gcat, 3, axis=2)
        gx = gsum.copy()
        gx1, gr1 = b1(g1)
        gx2, gr2 = b2(g2)
        gr, gr3b = b3b(g3)
        gx3, gr3a = b3a(gr)
        gx += gx1 + gx2 + gx3
        for part in (gr1, gr2, gr3a, gr3b):
            grads.update(part)
        return gx, grads

    return y, pullback


def basic_block(x, p, prefix) -> np.ndarray:
    return basic_block_vjp(x, p, prefix)[0]


def run_stage(i: int, x, cfg: BackboneConfig, p) -> np.ndarray:
    """Apply stage ``i`` (transition, then its blocks) to ``x``."""
    x = np.asarray(x)
    if f"stage{i}.down.weight" in p:
        x, _ = layers.conv_norm_act_vjp(x, p, f"stage{i}.down", stride=cfg.strides[i], padding=1)
    elif cfg.strides[i] != 1:
        raise ConfigError(f"stage{i} has stride {cfg.strides[i]} but no transition weights")
    for j in range(cfg.depths[i]):
        x = basic_block(x, p, f"stage{i}.block{j}")
    return x


def run_backbone(fg0, cfg: BackboneConfig, p) -> list[np.ndarray]:
    """Run all stages back to back, returning every stage output (finest first)."""
    fg0 = np.asarray(fg0)
    expected = p["stage0.block0.fuse.weight"].shape[3]
    if "stage0.down.weight" in p:
        expected = p["stage0.down.weight"].shape[2]
    if fg0.shape[2] != expected:
        raise ConfigError(f"input has {fg0.shape[2]} channels, stage 0 expects {expected}")
    outs = []
    x = fg0
    for i in range(cfg.num_stages):
        x = run_stage(i, x, cfg, p)
        outs.append(x)
    return outs

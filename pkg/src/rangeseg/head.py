"""Multi-stage fusion head and per-point class prediction."""

from __future__ import annotations

import numpy as np

from . import layers
from . import tensor_core as tc
from .errors import DimensionError
from .projection import ProjectionIndex, unflatten_vjp


def param_shapes(num_stages: int, channels: int, stage_widths, num_classes: int) -> layers.Shapes:
    return {
        **layers.mlp_shapes("head.point_mlp", num_stages * channels, channels, channels),
        **layers.conv_norm_shapes("head.image_conv", 1, sum(stage_widths), channels),
        **layers.mlp_shapes("head.group_mlp", channels, channels, channels),
        **layers.mlp_shapes("head.fuse_mlp", channels, channels, channels),
        **layers.linear_shapes("head.classifier", channels, num_classes),
    }


def fuse_point_path_vjp(stage_points, p):
    """Concatenate the per-stage point features and mix them with an MLP."""
    stage_points = [np.asarray(f) for f in stage_points]
    if len({f.shape[0] for f in stage_points}) > 1:
        raise DimensionError(f"stage point features disagree on N: {[f.shape[0] for f in stage_points]}")
    widths = [f.shape[1] for f in stage_points]
    y, back = layers.mlp_vjp(np.concatenate(stage_points, axis=1), p, "head.point_mlp")

    def pullback(g):
        gcat, grads = back(g)
        return np.split(gcat, np.cumsum(widths)[:-1], axis=1), grads

    return y, pullback


def fuse_point_path(stage_points, p) -> np.ndarray:
    return fuse_point_path_vjp(stage_points, p)[0]


def fuse_image_path_vjp(stage_images, target, p):
    """Resize each stage map to ``target``, concatenate, 1x1 conv + norm + relu."""
    h, w = target
    resized, backs = [], []
    for img in stage_images:
        r, b = tc.bilinear_resize_vjp(np.asarray(img), h, w)
        resized.append(r)
        backs.append(b)
    widths = [r.shape[2] for r in resized]
    y, b_conv = layers.conv_norm_act_vjp(np.concatenate(resized, axis=2), p, "head.image_conv")

    def pullback(g):
        gcat, grads = b_conv(g)
        parts = np.split(gcat, np.cumsum(widths)[:-1], axis=2)
        return [b(gp) for b, gp in zip(backs, parts)], grads

    return y, pullback


def fuse_image_path(stage_images, target, p) -> np.ndarray:
    return fuse_image_path_vjp(stage_images, target, p)[0]


def logits_vjp(fg_out, fp_out, fp0, index: ProjectionIndex, p):
    """Class scores from the fused group, point and initial point features.

    ``F = fuse_mlp(group_mlp(gather(fg_out)) + fp_out) + fp0`` followed by
    a linear classifier.  Pullback gives ``(g_fg_out, g_fp_out, g_fp0, grads)``.
    """
    fp_out, fp0 = np.asarray(fp_out), np.asarray(fp0)
    if fp_out.shape != fp0.shape:
        raise DimensionError(f"point path {fp_out.shape} and initial features {fp0.shape} differ")
    gathered, b_gather = unflatten_vjp(fg_out, index)
    a, b_gmlp = layers.mlp_vjp(gathered, p, "head.group_mlp")
    if a.shape != fp_out.shape:
        raise DimensionError(f"group path {a.shape} and point path {fp_out.shape} differ")
    f, b_fmlp = layers.mlp_vjp(a + fp_out, p, "head.fuse_mlp")
    scores, b_cls = layers.linear_vjp(f + fp0, p, "head.classifier")

    def pullback(g):
        gf, grads = b_cls(g)
        gsum, gr = b_fmlp(gf)
        grads.update(gr)
        ggath, gr = b_gmlp(gsum)
        grads.update(gr)
        return b_gather(ggath), gsum, gf, grads

    return scores, pullback


def logits(fg_out, fp_out, fp0, index, p) -> np.ndarray:
    return logits_vjp(fg_out, fp_out, fp0, index, p)[0]


def predict(scores) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    scores = np.asarray(scores)
    if scores.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(scores, axis=1).astype(np.int64)

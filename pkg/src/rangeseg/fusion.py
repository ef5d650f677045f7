"""Depth-guided attention fusion between point features and image features.

Per stage:

1. gather the stage's image features back to the points (resizing to the
   full grid first when the stage is downsampled);
2. ``depth_attention``: keys/values from the gathered and the point
   features, a query from each point's range, channel-wise softmax
   weights, weighted sum, output linear -> new point features;
3. ``reproject_fuse``: scatter the new point features onto the stage grid,
   concatenate with the stage's image features, 1x1 conv + norm + relu;
4. ``residual_enhance``: a sigmoid gate from two 3x3 convs scales the fused
   map, which is added onto the stage's image features.
"""

from __future__ import annotations

import numpy as np

from . import layers
from . import tensor_core as tc
from .errors import DimensionError
from .projection import ProjectionIndex, flatten_vjp, unflatten_vjp


def param_shapes(prefix: str, image_width: int, point_width: int, attn_width: int) -> layers.Shapes:
    return {
        **layers.linear_shapes(f"{prefix}.key_g", image_width, attn_width),
        **layers.linear_shapes(f"{prefix}.value_g", image_width, attn_width),
        **layers.linear_shapes(f"{prefix}.key_p", point_width, attn_width),
        **layers.linear_shapes(f"{prefix}.value_p", point_width, attn_width),
        **layers.linear_shapes(f"{prefix}.query", 1, attn_width),
        **layers.linear_shapes(f"{prefix}.out", attn_width, point_width),
        **layers.conv_norm_shapes(f"{prefix}.reproject", 1, point_width + image_width, image_width),
        **layers.conv_norm_shapes(f"{prefix}.gate1", 3, image_width, image_width),
        **layers.conv_norm_shapes(f"{prefix}.gate2", 3, image_width, image_width),
    }


def depth_attention_vjp(fg, fp, depth, p, prefix):
    """Returns new point features; pullback gives ``(g_fg, g_fp, g_depth, grads)``."""
    fg, fp = np.asarray(fg), np.asarray(fp)
    depth = np.asarray(depth).reshape(-1, 1)
    if not (fg.shape[0] == fp.shape[0] == depth.shape[0]):
        raise DimensionError(f"{prefix}: row counts differ ({fg.shape[0]}, {fp.shape[0]}, {depth.shape[0]})")
    vg, b_vg = layers.linear_vjp(fg, p, f"{prefix}.value_g")
    kg, b_kg = layers.linear_vjp(fg, p, f"{prefix}.key_g")
    vp, b_vp = layers.linear_vjp(fp, p, f"{prefix}.value_p")
    kp, b_kp = layers.linear_vjp(fp, p, f"{prefix}.key_p")
    q, b_q = layers.linear_vjp(depth.astype(fp.dtype, copy=False), p, f"{prefix}.query")
    wg, b_wg = tc.softmax_vjp(q * kg, axis=1)
    wp, b_wp = tc.softmax_vjp(q * kp, axis=1)
    fuse = wg * vg + wp * vp
    y, b_out = layers.linear_vjp(fuse, p, f"{prefix}.out")

    def pullback(g):
        gfuse, grads = b_out(g)
        gsg = b_wg(gfuse * vg)
        gsp = b_wp(gfuse * vp)
        gq = gsg * kg + gsp * kp
        gfg, gr = b_vg(gfuse * wg)
        grads.update(gr)
        gfg2, gr = b_kg(gsg * q)
        grads.update(gr)
        gfp, gr = b_vp(gfuse * wp)
        grads.update(gr)
        gfp2, gr = b_kp(gsp * q)
        grads.update(gr)
        gdepth, gr = b_q(gq)
        grads.update(gr)
        return gfg + gfg2, gfp + gfp2, gdepth, grads

    return y, pullback


def depth_attention(fg, fp, depth, p, prefix) -> np.ndarray:
    return depth_attention_vjp(fg, fp, depth, p, prefix)[0]


def attention_weights(fg, fp, depth, p, prefix):
    """The two per-point channel distributions ``(W_g, W_p)``."""
    depth = np.asarray(depth).reshape(-1, 1).astype(np.asarray(fp).dtype, copy=False)
    q = tc.linear(depth, p[f"{prefix}.query.weight"], p[f"{prefix}.query.bias"])
    kg = tc.linear(fg, p[f"{prefix}.key_g.weight"], p[f"{prefix}.key_g.bias"])
    kp = tc.linear(fp, p[f"{prefix}.key_p.weight"], p[f"{prefix}.key_p.bias"])
    return tc.softmax(q * kg, axis=1), tc.softmax(q * kp, axis=1)


def reproject_fuse_vjp(fp_i, fg_tilde, index: ProjectionIndex, p, prefix):
    fg_tilde = np.asarray(fg_tilde)
    if fg_tilde.ndim != 3 or fg_tilde.shape[:2] != index.shape:
        raise DimensionError(f"{prefix}: image {fg_tilde.shape} does not match index grid {index.shape}")
    scattered, b_flat = flatten_vjp(fp_i, index, "mean")
    cp = scattered.shape[2]
    cat = np.concatenate([scattered, fg_tilde], axis=2)
    y, b_conv = layers.conv_norm_act_vjp(cat, p, f"{prefix}.reproject")

    def pullback(g):
        gcat, grads = b_conv(g)
        return b_flat(gcat[:, :, :cp]), gcat[:, :, cp:], grads

    return y, pullback


def reproject_fuse(fp_i, fg_tilde, index, p, prefix) -> np.ndarray:
    return reproject_fuse_vjp(fp_i, fg_tilde, index, p, prefix)[0]


def _gate_vjp(fused, p, prefix):
    a, b1 = layers.conv_norm_act_vjp(fused, p, f"{prefix}.gate1", padding=1)
    gate, b2 = layers.conv_norm_act_vjp(a, p, f"{prefix}.gate2", padding=1, act="sigmoid")

    def pullback(g):
        ga, grads = b2(g)
        gx, gr = b1(ga)
        grads.update(gr)
        return gx, grads

    return gate, pullback


def residual_gate(fused, p, prefix) -> np.ndarray:
    return _gate_vjp(np.asarray(fused), p, prefix)[0]


def residual_enhance_vjp(fused, base, p, prefix):
    """``base + gate(fused) * fused``; pullback gives ``(g_fused, g_base, grads)``."""
    fused, base = np.asarray(fused), np.asarray(base)
    if fused.shape != base.shape:
        raise DimensionError(f"{prefix}: fused map {fused.shape} and base {base.shape} differ")
    gate, b_gate = _gate_vjp(fused, p, prefix)
    y = base + gate * fused

    def pullback(g):
        gfused, grads = b_gate(g * fused)
        return gfused + g * gate, g, grads

    return y, pullback


def residual_enhance(fused, base, p, prefix) -> np.ndarray:
    return residual_enhance_vjp(fused, base, p, prefix)[0]


def fusion_stage_vjp(fp_prev, fg_stage, index: ProjectionIndex, depth, p, prefix):
    """One fusion step at the resolution of ``fg_stage``.

    ``index`` is the full-resolution projection.  Returns
    ``((F_p, F_g), pullback)`` with ``pullback(g_p, g_g)`` giving
    ``(g_fp_prev, g_fg_stage, grads)``.
    """
    fg_stage = np.asarray(fg_stage)
    h, w = index.shape
    full, b_resize = tc.bilinear_resize_vjp(fg_stage, h, w)
    gathered, b_gather = unflatten_vjp(full, index)
    fp_new, b_attn = depth_attention_vjp(gathered, fp_prev, depth, p, prefix)
    stage_index = index.coarsen(fg_stage.shape[:2])
    fused, b_reproj = reproject_fuse_vjp(fp_new, fg_stage, stage_index, p, prefix)
    fg_new, b_res = residual_enhance_vjp(fused, fg_stage, p, prefix)

    def pullback(g_p, g_g):
        g_fused, g_base, grads = b_res(g_g)
        g_fp_new, g_fg_cat, gr = b_reproj(g_fused)
        layers.add_grads(grads, gr)
        g_gathered, g_fp_prev, _, gr = b_attn(g_p + g_fp_new)
        layers.add_grads(grads, gr)
        g_fg = g_base + g_fg_cat + b_resize(b_gather(g_gathered))
        return g_fp_prev, g_fg, grads

    return (fp_new, fg_new), pullback


def fusion_stage(fp_prev, fg_stage, index, depth, p, prefix):
    return fusion_stage_vjp(fp_prev, fg_stage, index, depth, p, prefix)[0]

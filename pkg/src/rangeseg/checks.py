"""Finite-difference gradient checks for every learnable block, at toy sizes.

All checks run in float64 with central differences (``eps=1e-4``) against
randomly drawn parameters, so normalization and bias paths are exercised
rather than sitting at their identity initialisation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import backbone, encoder, fusion, head, layers
from .projection import ProjectionIndex
from .tensor_core import gradient_errors

THRESHOLD = 1e-4
EPS = 1e-4


def random_params(shapes: layers.Shapes, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in shapes.items():
        if name.endswith(".weight"):
            out[name] = rng.normal(0.0, 0.5, shape)
        elif name.endswith(".scale"):
            out[name] = rng.uniform(0.5, 1.5, shape)
        elif name.endswith(".var"):
            out[name] = rng.uniform(0.5, 1.5, shape)
        else:
            out[name] = rng.normal(0.0, 0.1, shape)
    return out


def toy_index(rng: np.random.Generator, n: int, shape: tuple[int, int]) -> ProjectionIndex:
    h, w = shape
    v = rng.integers(0, h, n)
    u = rng.integers(0, w, n)
    # force at least one shared cell so mean/max reductions are exercised
    if n >= 2:
        v[1], u[1] = v[0], u[0]
    return ProjectionIndex(u, v, shape, r=rng.uniform(1.0, 5.0, n))


@dataclass
class Check:
    name: str
    fn: Callable
    inputs: dict[str, np.ndarray]
    wrt: list[str]


def _learnable(params) -> list[str]:
    return [k for k in params if not layers.is_buffer(k)]


def _corrupted(fn: Callable, factor: float) -> Callable:
    def wrapped(vals):
        out, back = fn(vals)
        return out, lambda g: {k: None if v is None else v * factor for k, v in back(g).items()}

    return wrapped


def build_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    c = 4
    checks = []

    # point embedding MLP
    p = random_params(encoder.param_shapes(c), rng)
    inputs = {"x": rng.normal(size=(5, encoder.DESCRIPTOR_DIM)), **p}

    def embed(vals):
        y, back = encoder.embed_points_vjp(vals["x"], vals)
        return y, lambda g: (lambda gx, gr: {"x": gx, **gr})(*back(g))

    embed_keys = ["x"] + [k for k in _learnable(p) if k.startswith("encoder.embed")]
    checks.append(Check("embed_mlp", embed, inputs, embed_keys))

    # group aggregation (max + mean pooling)
    agg_index = toy_index(rng, 7, (3, 4))
    inputs = {"x": rng.normal(size=(7, c)), **p}

    def aggregate(vals):
        y, back = encoder.aggregate_groups_vjp(vals["x"], agg_index, vals)
        return y, lambda g: (lambda gx, gr: {"x": gx, **gr})(*back(g))

    agg_keys = ["x", "encoder.agg.weight", "encoder.agg.bias"]
    checks.append(Check("aggregate_groups", aggregate, inputs, agg_keys))

    # multi-branch basic block
    p = random_params(backbone.basic_block_shapes("blk", c), rng)
    inputs = {"x": rng.normal(size=(6, 8, c)), **p}

    def block(vals):
        y, back = backbone.basic_block_vjp(vals["x"], vals, "blk")
        return y, lambda g: (lambda gx, gr: {"x": gx, **gr})(*back(g))

    checks.append(Check("basic_block", block, inputs, ["x"] + _learnable(p)))

    # depth-guided attention
    p = random_params(fusion.param_shapes("fus", c, c, c), rng)
    n = 5
    inputs = {"fg": rng.normal(size=(n, c)), "fp": rng.normal(size=(n, c)),
              "depth": rng.uniform(0.5, 2.0, (n, 1)), **p}
    attn_params = [k for k in _learnable(p) if k.split(".")[1] in ("key_g", "value_g", "key_p", "value_p", "query", "out")]

    def attention(vals):
        y, back = fusion.depth_attention_vjp(vals["fg"], vals["fp"], vals["depth"], vals, "fus")

        def pull(g):
            gfg, gfp, gd, gr = back(g)
            return {"fg": gfg, "fp": gfp, "depth": gd, **gr}

        return y, pull

    checks.append(Check("depth_attention", attention, inputs, ["fg", "fp", "depth"] + attn_params))

    # re-projection fuse
    reproj_index = toy_index(rng, 6, (4, 4))
    inputs = {"fp": rng.normal(size=(6, c)), "fg": rng.normal(size=(4, 4, c)), **p}

    def reproject(vals):
        y, back = fusion.reproject_fuse_vjp(vals["fp"], vals["fg"], reproj_index, vals, "fus")
        return y, lambda g: (lambda a, b, gr: {"fp": a, "fg": b, **gr})(*back(g))

    reproj_params = [k for k in _learnable(p) if ".reproject" in k]
    checks.append(Check("reproject_fuse", reproject, inputs, ["fp", "fg"] + reproj_params))

    # residual-attentive enhancement
    inputs = {"fused": rng.normal(size=(4, 6, c)), "base": rng.normal(size=(4, 6, c)), **p}
    gate_params = [k for k in _learnable(p) if ".gate" in k]

    def enhance(vals):
        y, back = fusion.residual_enhance_vjp(vals["fused"], vals["base"], vals, "fus")
        return y, lambda g: (lambda a, b, gr: {"fused": a, "base": b, **gr})(*back(g))

    checks.append(Check("residual_enhance", enhance, inputs, ["fused", "base"] + gate_params))

    # one full fusion stage on a stride-2 map
    n = 6
    stage_index = toy_index(rng, n, (4, 4))
    depth = stage_index.r.reshape(-1, 1)
    inputs = {"fp": rng.normal(size=(n, c)), "fg": rng.normal(size=(2, 2, c)), **p}

    def stage(vals):
        (fp_new, fg_new), back = fusion.fusion_stage_vjp(vals["fp"], vals["fg"], stage_index, depth, vals, "fus")
        out = np.concatenate([fp_new.ravel(), fg_new.ravel()])

        def pull(g):
            gp, gg = g[: fp_new.size].reshape(fp_new.shape), g[fp_new.size :].reshape(fg_new.shape)
            a, b, gr = back(gp, gg)
            return {"fp": a, "fg": b, **gr}

        return out, pull

    checks.append(Check("fusion_stage", stage, inputs, ["fp", "fg"] + _learnable(p)))

    # fusion head: point path, image path and logits together
    widths = (c, 2 * c)
    k_cls = 3
    p = random_params(head.param_shapes(2, c, widths, k_cls), rng)
    n = 6
    head_index = toy_index(rng, n, (4, 6))
    inputs = {
        "fp1": rng.normal(size=(n, c)), "fp2": rng.normal(size=(n, c)),
        "fg1": rng.normal(size=(4, 6, widths[0])), "fg2": rng.normal(size=(2, 3, widths[1])),
        "fp0": rng.normal(size=(n, c)), **p,
    }

    def fusion_head(vals):
        fp_out, b_pts = head.fuse_point_path_vjp([vals["fp1"], vals["fp2"]], vals)
        fg_out, b_img = head.fuse_image_path_vjp([vals["fg1"], vals["fg2"]], (4, 6), vals)
        scores, b_log = head.logits_vjp(fg_out, fp_out, vals["fp0"], head_index, vals)

        def pull(g):
            gfg_out, gfp_out, gfp0, grads = b_log(g)
            (gfg1, gfg2), gr = b_img(gfg_out)
            layers.add_grads(grads, gr)
            (gfp1, gfp2), gr = b_pts(gfp_out)
            layers.add_grads(grads, gr)
            return {"fp1": gfp1, "fp2": gfp2, "fg1": gfg1, "fg2": gfg2, "fp0": gfp0, **grads}

        return scores, pull

    checks.append(Check("fusion_head", fusion_head, inputs,
                        ["fp1", "fp2", "fg1", "fg2", "fp0"] + _learnable(p)))
    return checks


@dataclass
class CheckResult:
    name: str
    error: float
    worst_tensor: str

    @property
    def passed(self) -> bool:
        return self.error < THRESHOLD


def run_suite(seed: int = 0, corrupt: str | None = None, only=None) -> list[CheckResult]:
    """Run every block check; ``corrupt`` names a block whose analytic
    gradient is deliberately scaled (a negative control)."""
    results = []
    for chk in build_checks(seed):
        if only is not None and chk.name not in only:
            continue
        fn = _corrupted(chk.fn, 1.01) if chk.name == corrupt else chk.fn
        errs = gradient_errors(fn, chk.inputs, eps=EPS, wrt=chk.wrt, seed=seed, name=chk.name)
        worst = max(errs, key=errs.get)
        results.append(CheckResult(chk.name, errs[worst], worst))
    return results

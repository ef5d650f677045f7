"""Parameterised building blocks shared by the network modules.

Parameters live in a flat mapping keyed by dotted names.  Each block takes
that mapping plus its name prefix, and its pullback returns a dict of
parameter gradients under the same full names.  Normalization layers own
four tensors: ``scale``, ``shift``, ``mean`` and ``var``.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor_core as tc

Shapes = dict[str, tuple[int, ...]]

NORM_FIELDS = ("scale", "shift", "mean", "var")
# statistics, not learnable; excluded from gradients and parameter counts
BUFFER_SUFFIXES = (".mean", ".var")


def norm_shapes(prefix: str, c: int) -> Shapes:
    return {f"{prefix}.{f}": (c,) for f in NORM_FIELDS}


def norm_args(p: Mapping[str, np.ndarray], prefix: str):
    return tuple(p[f"{prefix}.{f}"] for f in NORM_FIELDS)


def norm_grads(prefix: str, gscale, gshift) -> dict[str, np.ndarray]:
    return {f"{prefix}.scale": gscale, f"{prefix}.shift": gshift}


def linear_shapes(prefix: str, cin: int, cout: int) -> Shapes:
    return {f"{prefix}.weight": (cin, cout), f"{prefix}.bias": (cout,)}


def linear_vjp(x, p, prefix):
    y, back = tc.linear_vjp(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"])

    def pullback(g):
        gx, gw, gb = back(g)
        return gx, {f"{prefix}.weight": gw, f"{prefix}.bias": gb}

    return y, pullback


def mlp_shapes(prefix: str, cin: int, hidden: int, cout: int) -> Shapes:
    return {
        **linear_shapes(f"{prefix}.fc1", cin, hidden),
        **norm_shapes(f"{prefix}.norm1", hidden),
        **linear_shapes(f"{prefix}.fc2", hidden, cout),
    }


def mlp_vjp(x, p, prefix):
    """linear -> norm+relu -> linear, applied row by row."""
    h, back1 = linear_vjp(x, p, f"{prefix}.fc1")
    a, back_act = tc.norm_act_vjp(h, *norm_args(p, f"{prefix}.norm1"))
    y, back2 = linear_vjp(a, p, f"{prefix}.fc2")

    def pullback(g):
        ga, grads = back2(g)
        gh, gs, gb = back_act(ga)
        grads.update(norm_grads(f"{prefix}.norm1", gs, gb))
        gx, g1 = back1(gh)
        grads.update(g1)
        return gx, grads

    return y, pullback


def mlp(x, p, prefix):
    return mlp_vjp(x, p, prefix)[0]


def conv_shapes(prefix: str, k: int, cin: int, cout: int, bias: bool = False) -> Shapes:
    shapes = {f"{prefix}.weight": (k, k, cin, cout)}
    if bias:
        shapes[f"{prefix}.bias"] = (cout,)
    return shapes


def conv_vjp(x, p, prefix, stride=1, dilation=1, padding=0):
    bias = p.get(f"{prefix}.bias")
    y, back = tc.conv2d_vjp(x, p[f"{prefix}.weight"], stride, dilation, padding, bias)

    def pullback(g):
        gx, gk, gb = back(g)
        grads = {f"{prefix}.weight": gk}
        if bias is not None:
            grads[f"{prefix}.bias"] = gb
        return gx, grads

    return y, pullback


def conv_norm_shapes(prefix: str, k: int, cin: int, cout: int) -> Shapes:
    return {**conv_shapes(f"{prefix}", k, cin, cout), **norm_shapes(f"{prefix}.norm", cout)}


def conv_norm_act_vjp(x, p, prefix, stride=1, dilation=1, padding=0, act="relu"):
    """Convolution followed by normalization and ``relu`` (or ``sigmoid``)."""
    z, conv_back = conv_vjp(x, p, prefix, stride, dilation, padding)
    na = tc.norm_act_vjp if act == "relu" else tc.norm_sigmoid_vjp
    y, na_back = na(z, *norm_args(p, f"{prefix}.norm"))

    def pullback(g):
        gz, gs, gb = na_back(g)
        gx, grads = conv_back(gz)
        grads.update(norm_grads(f"{prefix}.norm", gs, gb))
        return gx, grads

    return y, pullback


def add_grads(total: dict, more: dict) -> dict:
    for k, v in more.items():
        total[k] = total[k] + v if k in total else v
    return total


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)

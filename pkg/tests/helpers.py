import numpy as np

from rangeseg.layers import is_buffer


def identity_params(shapes, weight=0.0):
    """Zero (or constant) weights, zero biases and identity normalization."""
    out = {}
    for name, shape in shapes.items():
        if name.endswith((".scale", ".var")):
            out[name] = np.ones(shape)
        elif name.endswith(".weight"):
            out[name] = np.full(shape, weight)
        else:
            out[name] = np.zeros(shape)
    return out


def learnable(params):
    return [k for k in params if not is_buffer(k)]

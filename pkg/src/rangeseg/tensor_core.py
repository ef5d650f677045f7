"""Dense tensor kernels with hand-written reverse-mode rules.

Tensors are plain numpy arrays.  Images are channels-last ``(H, W, C)``;
point features are ``(N, C)``.  Every differentiable op ``foo`` has a
``foo_vjp`` twin that returns ``(output, pullback)`` where ``pullback``
maps the output cotangent to the input cotangents.

Conventions: convolution is cross-correlation with zero padding; resizing
samples with ``align_corners=False``; normalization uses frozen (inference)
statistics.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import DimensionError, NumericInstabilityError, ParameterError

BN_EPS = 1e-5


def _finite(op: str, y: np.ndarray) -> np.ndarray:
    if not np.isfinite(y).all():
        raise NumericInstabilityError(op)
    return y


# -- linear ------------------------------------------------------------------

def linear(x, weight, bias=None):
    return linear_vjp(x, weight, bias)[0]


def linear_vjp(x, weight, bias=None):
    x = np.asarray(x)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    y = x @ weight
    if bias is not None:
        y = y + bias
    _finite("linear", y)

    def pullback(g):
        x2 = x.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.T
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    return y, pullback


# -- convolution ---------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - ((k - 1) * dilation + 1)) // stride + 1


def conv2d(x, kernel, stride=1, dilation=1, padding=0, bias=None):
    return conv2d_vjp(x, kernel, stride, dilation, padding, bias)[0]


def conv2d_vjp(x, kernel, stride=1, dilation=1, padding=0, bias=None):
    """``x`` is ``(H, W, Cin)``, ``kernel`` is ``(k, k, Cin, Cout)``."""
    x = np.asarray(x)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected (H,W,C) input and (k,k,Cin,Cout) kernel, got {x.shape}, {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[2] != cin:
        raise DimensionError(f"conv2d: input has {x.shape[2]} channels, kernel expects {cin}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise DimensionError("conv2d: stride and dilation must be positive, padding non-negative")
    h, w = x.shape[:2]
    ext_h = (kh - 1) * dilation + 1
    ext_w = (kw - 1) * dilation + 1
    if ext_h > h + 2 * padding or ext_w > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel extent {ext_h}x{ext_w} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(w, kw, stride, dilation, padding)
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0))) if padding else x

    def tap(i, j):
        return (slice(i * dilation, i * dilation + stride * (ho - 1) + 1, stride),
                slice(j * dilation, j * dilation + stride * (wo - 1) + 1, stride))

    y = np.zeros((ho * wo, cout), dtype=np.result_type(x, kernel))
    for i in range(kh):
        for j in range(kw):
            patch = xp[tap(i, j)].reshape(ho * wo, cin)
            y += patch @ kernel[i, j]
    if bias is not None:
        y += bias
    y = _finite("conv2d", y.reshape(ho, wo, cout))

    def pullback(g):
        g2 = np.asarray(g).reshape(ho * wo, cout)
        gxp = np.zeros(xp.shape, dtype=g2.dtype)
        gk = np.empty(kernel.shape, dtype=g2.dtype)
        for i in range(kh):
            for j in range(kw):
                sl = tap(i, j)
                patch = xp[sl].reshape(ho * wo, cin)
                gk[i, j] = patch.T @ g2
                gxp[sl] += (g2 @ kernel[i, j].T).reshape(ho, wo, cin)
        gx = gxp[padding : padding + h, padding : padding + w] if padding else gxp
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gk, gb

    return y, pullback


# -- pointwise -----------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_vjp(x):
    y = relu(x)
    return y, lambda g: g * (x > 0)


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def sigmoid_vjp(x):
    y = sigmoid(x)
    return y, lambda g: g * y * (1 - y)


def softmax(x, axis=-1):
    x = np.asarray(x)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return _finite("softmax", z / z.sum(axis=axis, keepdims=True))


def softmax_vjp(x, axis=-1):
    y = softmax(x, axis)
    return y, lambda g: y * (g - (g * y).sum(axis=axis, keepdims=True))


# -- normalization -------------------------------------------------------------

def batch_norm_vjp(x, scale, shift, running_mean, running_var):
    """Inference-mode normalization over the last axis."""
    x = np.asarray(x)
    c = x.shape[-1]
    for name, t in (("scale", scale), ("shift", shift), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise DimensionError(f"norm: {name} has shape {t.shape}, expected ({c},)")
    if not (running_var > 0).all():
        raise ParameterError("norm: running_var must be strictly positive")
    inv = 1 / np.sqrt(running_var + BN_EPS)
    xhat = (x - running_mean) * inv
    y = scale * xhat + shift

    def pullback(g):
        axes = tuple(range(g.ndim - 1))
        return g * (scale * inv), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return y, pullback


def batch_norm(x, scale, shift, running_mean, running_var):
    return batch_norm_vjp(x, scale, shift, running_mean, running_var)[0]


def norm_act(x, scale, shift, running_mean, running_var):
    """``relu(scale * (x - mean) / sqrt(var + eps) + shift)``."""
    return relu(batch_norm(x, scale, shift, running_mean, running_var))


def norm_act_vjp(x, scale, shift, running_mean, running_var):
    z, bn_back = batch_norm_vjp(x, scale, shift, running_mean, running_var)
    y, act_back = relu_vjp(z)
    return y, lambda g: bn_back(act_back(g))


def norm_sigmoid_vjp(x, scale, shift, running_mean, running_var):
    z, bn_back = batch_norm_vjp(x, scale, shift, running_mean, running_var)
    y, act_back = sigmoid_vjp(z)
    return y, lambda g: bn_back(act_back(g))


# -- resizing ------------------------------------------------------------------

def interp_matrix(out_size: int, in_size: int, dtype=np.float64) -> np.ndarray:
    """Row ``o`` holds the 1-D linear interpolation weights of output sample ``o``."""
    scale = in_size / out_size
    src = np.maximum((np.arange(out_size) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize(x, h, w):
    return bilinear_resize_vjp(x, h, w)[0]


def bilinear_resize_vjp(x, h, w):
    x = np.asarray(x)
    if h < 1 or w < 1:
        raise DimensionError(f"bilinear_resize: target {h}x{w} must be positive")
    hin, win, c = x.shape
    if (h, w) == (hin, win):
        return x.copy(), lambda g: g
    my = interp_matrix(h, hin, x.dtype)
    mx = interp_matrix(w, win, x.dtype)
    tmp = np.tensordot(my, x, axes=(1, 0))  # (h, win, c)
    y = np.tensordot(mx, tmp, axes=(1, 1)).transpose(1, 0, 2)  # (h, w, c)
    y = np.ascontiguousarray(y)

    def pullback(g):
        gt = np.tensordot(mx.T, g, axes=(1, 1)).transpose(1, 0, 2)  # (h, win, c)
        return np.tensordot(my.T, gt, axes=(1, 0))

    return y, pullback


# -- gradient checking ---------------------------------------------------------

def gradient_errors(
    f: Callable,
    inputs: Mapping[str, np.ndarray],
    eps: float = 1e-4,
    wrt=None,
    seed: int = 0,
    name: str | None = None,
) -> dict[str, float]:
    """Compare ``f``'s pullback against central differences, per input tensor.

    ``f`` takes a dict of float64 arrays and returns ``(output, pullback)``;
    ``pullback(g)`` returns a dict of cotangents.  The scalar probed is
    ``sum(output * R)`` for a fixed random ``R``.  For each tensor the error
    is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``.
    """
    name = name or getattr(f, "__name__", repr(f))
    vals = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    keys = list(vals) if wrt is None else list(wrt)

    def run():
        try:
            out, back = f(vals)
        except NumericInstabilityError as exc:
            raise NumericInstabilityError(name, str(exc)) from exc
        out = np.asarray(out, dtype=np.float64)
        if not np.isfinite(out).all():
            raise NumericInstabilityError(name)
        return out, back

    out, back = run()
    probe = np.random.default_rng(seed).standard_normal(out.shape)
    analytic = back(probe)
    errors = {}
    for key in keys:
        if key not in analytic or analytic[key] is None:
            raise KeyError(f"{name}: pullback returned no gradient for {key!r}")
        a = np.asarray(analytic[key], dtype=np.float64)
        x = vals[key]
        if a.shape != x.shape:
            raise DimensionError(f"{name}: gradient for {key!r} has shape {a.shape}, expected {x.shape}")
        num = np.zeros_like(x)
        flat, nflat = x.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float((run()[0] * probe).sum())
            flat[i] = orig - eps
            down = float((run()[0] * probe).sum())
            flat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        denom = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-8)
        errors[key] = float(np.abs(a - num).max(initial=0.0) / denom)
    return errors


def grad_check(f, inputs, eps: float = 1e-4, wrt=None, seed: int = 0, name=None) -> float:
    """Largest relative gradient error over all checked tensors."""
    errs = gradient_errors(f, inputs, eps=eps, wrt=wrt, seed=seed, name=name)
    return max(errs.values(), default=0.0)

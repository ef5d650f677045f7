"""Independent, deliberately naive 64-bit reference implementations."""

import math
from fractions import Fraction

import numpy as np


def linear(x, w, b):
    n, cin = x.shape
    cout = w.shape[1]
    out = np.zeros((n, cout))
    for i in range(n):
        for o in range(cout):
            acc = float(b[o])
            for k in range(cin):
                acc += float(x[i, k]) * float(w[k, o])
            out[i, o] = acc
    return out


def conv2d(x, k, stride=1, dilation=1, padding=0):
    h, w, cin = x.shape
    kk, _, _, cout = k.shape
    span = (kk - 1) * dilation + 1
    ho = (h + 2 * padding - span) // stride + 1
    wo = (w + 2 * padding - span) // stride + 1
    out = np.zeros((ho, wo, cout))
    for oy in range(ho):
        for ox in range(wo):
            for co in range(cout):
                acc = 0.0
                for ky in range(kk):
                    for kx in range(kk):
                        iy = oy * stride + ky * dilation - padding
                        ix = ox * stride + kx * dilation - padding
                        if 0 <= iy < h and 0 <= ix < w:
                            for ci in range(cin):
                                acc += float(x[iy, ix, ci]) * float(k[ky, kx, ci, co])
                out[oy, ox, co] = acc
    return out


def softmax_rows(x):
    out = np.zeros(x.shape)
    for i in range(x.shape[0]):
        m = max(float(v) for v in x[i])
        e = [math.exp(float(v) - m) for v in x[i]]
        s = math.fsum(e)
        out[i] = [v / s for v in e]
    return out


def bilinear(x, h, w):
    """Per-pixel half-pixel-centre bilinear sampling with edge clamping."""
    hin, win, c = x.shape
    out = np.zeros((h, w, c))
    for oy in range(h):
        sy = max((oy + 0.5) * hin / h - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), hin - 1)
        y1 = min(y0 + 1, hin - 1)
        fy = sy - y0
        for ox in range(w):
            sx = max((ox + 0.5) * win / w - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), win - 1)
            x1 = min(x0 + 1, win - 1)
            fx = sx - x0
            for ch in range(c):
                top = (1 - fx) * x[y0, x0, ch] + fx * x[y0, x1, ch]
                bot = (1 - fx) * x[y1, x0, ch] + fx * x[y1, x1, ch]
                out[oy, ox, ch] = (1 - fy) * top + fy * bot
    return out


def norm_act(x, scale, shift, mean, var, eps=1e-5):
    out = np.zeros(x.shape)
    flat, of = x.reshape(-1, x.shape[-1]), out.reshape(-1, x.shape[-1])
    for i in range(flat.shape[0]):
        for c in range(flat.shape[1]):
            y = float(scale[c]) * (float(flat[i, c]) - float(mean[c])) / math.sqrt(float(var[c]) + eps) + float(shift[c])
            of[i, c] = max(y, 0.0)
    return out


def flatten_mean(feat, u, v, shape):
    h, w = shape
    sums, counts = {}, {}
    for i in range(len(u)):
        key = (int(v[i]), int(u[i]))
        sums[key] = sums.get(key, 0.0) + feat[i].astype(np.float64)
        counts[key] = counts.get(key, 0) + 1
    out = np.zeros((h, w, feat.shape[1]))
    for (vv, uu), s in sums.items():
        out[vv, uu] = s / counts[(vv, uu)]
    return out


def confusion(pred, gt, k, ignore_id):
    cm = [[0] * k for _ in range(k)]
    for p, g in zip(pred, gt):
        if g == ignore_id:
            continue
        cm[g][p] += 1
    return cm


def exact_scores(cm):
    """Per-class IoU / Acc as Fractions (None when absent) plus their means."""
    k = len(cm)
    ious, accs = [], []
    for c in range(k):
        tp = cm[c][c]
        fn = sum(cm[c]) - tp
        fp = sum(cm[r][c] for r in range(k)) - tp
        ious.append(Fraction(tp, tp + fp + fn) if tp + fp + fn else None)
        accs.append(Fraction(tp, tp + fn) if tp + fn else None)

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return sum(vals, Fraction(0)) / len(vals) if vals else None

    return ious, accs, mean(ious), mean(accs)

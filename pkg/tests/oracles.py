"""Independent reference computations in plain Python / float64 numpy, used as test oracles."""

from __future__ import annotations

import math

import numpy as np


def matmul_loops(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_naive(row):
    e = [math.exp(float(v)) for v in row]
    z = sum(e)
    return [x / z for x in e]


def attend_loops(q, k, v):
    """Per-query scalar loop: weights exp(q.k / sqrt(d)) normalized, applied to values."""
    q, k, v = (np.asarray(x, dtype=np.float64) for x in (q, k, v))
    d = q.shape[-1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        scores = [sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d) for j in range(k.shape[0])]
        top = max(scores)
        w = [math.exp(s - top) for s in scores]
        z = sum(w)
        for j in range(k.shape[0]):
            out[i] += (w[j] / z) * v[j]
    return out


def partition_mass(q, k):
    """Per-query sum of exp(q.k / sqrt(d)), unshifted, float64."""
    q, k = np.asarray(q, dtype=np.float64), np.asarray(k, dtype=np.float64)
    d = q.shape[-1]
    return np.exp(q @ k.T / math.sqrt(d)).sum(axis=1)


def conv2d_loops(x, w, b, stride, padding):
    x, w = np.asarray(x, dtype=np.float64), np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[bi, oc, i, j] = float((patch * w[oc]).sum()) + (float(b[oc]) if b is not None else 0.0)
    return out


def layer_norm_naive(row, eps=1e-5):
    row = [float(v) for v in row]
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return [(v - mu) / math.sqrt(var + eps) for v in row]


def ssim_constant(c1: float, c2: float, data_range: float = 1.0) -> float:
    k1 = (0.01 * data_range) ** 2
    return (2 * c1 * c2 + k1) / (c1 * c1 + c2 * c2 + k1)


def ssim_windows(x, y, win=8, stride=4, data_range=1.0):
    """Plain-loop windowed SSIM over a single-channel pair."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(0, x.shape[0] - win + 1, stride):
        for j in range(0, x.shape[1] - win + 1, stride):
            a = x[i:i + win, j:j + win].ravel()
            b = y[i:i + win, j:j + win].ravel()
            ma, mb = a.mean(), b.mean()
            va, vb = ((a - ma) ** 2).mean(), ((b - mb) ** 2).mean()
            cov = ((a - ma) * (b - mb)).mean()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def channel_terms(fx, fy, c1=1e-6, c2=1e-6):
    """Texture and structure terms of one feature channel (flattened arrays)."""
    fx, fy = np.asarray(fx, dtype=np.float64).ravel(), np.asarray(fy, dtype=np.float64).ravel()
    mx, my = fx.mean(), fy.mean()
    vx, vy = ((fx - mx) ** 2).mean(), ((fy - my) ** 2).mean()
    cxy = ((fx - mx) * (fy - my)).mean()
    return (2 * mx * my + c1) / (mx * mx + my * my + c1), (2 * cxy + c2) / (vx + vy + c2)


def scanline_area(shape: str, cy: float, cx: float, size: int = 32) -> int:
    """Count pixel centres inside a shape by solving each row's horizontal extent."""
    count = 0
    for row in range(size):
        v = row + 0.5 - cy
        if shape == "circle":
            r2 = 6.5 ** 2 - v * v
            if r2 < 0:
                continue
            half = math.sqrt(r2)
        elif shape == "square":
            if abs(v) > 6.0:
                continue
            half = 6.0
        else:
            if v < -6.0 or v > 6.0:
                continue
            half = 6.5 * (v + 6.0) / 12.0
        lo, hi = cx - half, cx + half
        # integer columns c with lo <= c + 0.5 <= hi, clipped to the image
        first = max(0, math.ceil(lo - 0.5))
        last = min(size - 1, math.floor(hi - 0.5))
        count += max(0, last - first + 1)
    return count


def crop_bound(i: int, total: int, r_min=0.1, r_max=1.0, lam=0.025) -> float:
    return lam ** (i / total) * (r_max - r_min) + r_min

"""Scalar-loop reference implementations.

Deliberately naive: plain Python loops over float64 scalars, sharing no code
with the vectorized kernels they are used to check.
"""

from __future__ import annotations

import math

import numpy as np


def matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    m, k = a.shape
    k2, p = b.shape
    assert k == k2
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def softmax_tokens(k) -> list[list[float]]:
    """Column-wise (over tokens) softmax of an N x C array, as nested lists."""
    k = np.asarray(k, dtype=float)
    n, c = k.shape
    out = [[0.0] * c for _ in range(n)]
    for ch in range(c):
        col = [float(k[i, ch]) for i in range(n)]
        mx = max(col)
        ex = [math.exp(x - mx) for x in col]
        z = sum(ex)
        for i in range(n):
            out[i][ch] = ex[i] / z
    return out


def factorized_attention(q, k, v) -> np.ndarray:
    """``(Q / sqrt(C)) (softmax_tokens(K)^T V)`` by explicit triple loops."""
    q, v = np.asarray(q, dtype=float), np.asarray(v, dtype=float)
    n, c = q.shape
    nk, cv = v.shape
    a = softmax_tokens(k)
    ctx = [[0.0] * cv for _ in range(c)]
    for i in range(c):
        for j in range(cv):
            s = 0.0
            for t in range(nk):
                s += a[t][i] * float(v[t, j])
            ctx[i][j] = s
    scale = 1.0 / math.sqrt(c)
    out = np.zeros((n, cv))
    for t in range(n):
        for j in range(cv):
            s = 0.0
            for i in range(c):
                s += float(q[t, i]) * scale * ctx[i][j]
            out[t, j] = s
    return out


def scaled_dot_product_attention(q, k, v) -> np.ndarray:
    q, k, v = (np.asarray(x, dtype=float) for x in (q, k, v))
    n, c = q.shape
    nk = k.shape[0]
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        logits = []
        for j in range(nk):
            s = 0.0
            for t in range(c):
                s += float(q[i, t]) * float(k[j, t])
            logits.append(s / math.sqrt(c))
        mx = max(logits)
        w = [math.exp(x - mx) for x in logits]
        z = sum(w)
        for j in range(nk):
            for t in range(v.shape[1]):
                out[i, t] += w[j] / z * float(v[j, t])
    return out


def depthwise_conv2d(x, kernel) -> np.ndarray:
    """Zero-padded same-size depthwise cross-correlation on [H, W, C]."""
    x, kernel = np.asarray(x, dtype=float), np.asarray(kernel, dtype=float)
    h, w, c = x.shape
    m = kernel.shape[0]
    r = (m - 1) // 2
    out = np.zeros((h, w, c))
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                s = 0.0
                for dy in range(m):
                    for dx in range(m):
                        y, xx = i + dy - r, j + dx - r
                        if 0 <= y < h and 0 <= xx < w:
                            s += float(x[y, xx, ch]) * float(kernel[dy, dx, ch])
                out[i, j, ch] = s
    return out


def bilinear_resize(x, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear sampling, coordinates clamped to the edge."""
    x = np.asarray(x, dtype=float)
    h, w, c = x.shape
    out = np.zeros((out_h, out_w, c))
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            for ch in range(c):
                top = x[y0, x0, ch] * (1 - fx) + x[y0, x1, ch] * fx
                bot = x[y1, x0, ch] * (1 - fx) + x[y1, x1, ch] * fx
                out[i, j, ch] = top * (1 - fy) + bot * fy
    return out


def relative_term(q, v, p) -> np.ndarray:
    """``(E V)_i^(l) = sum_j 1{|j-i| <= r} q_i^(l) p_{j-i}^(l) v_j^(l)`` by loops."""
    q, v, p = (np.asarray(a, dtype=float) for a in (q, v, p))
    n, c = q.shape
    r = (p.shape[0] - 1) // 2
    out = np.zeros((n, c))
    for ch in range(c):
        for i in range(n):
            s = 0.0
            for j in range(n):
                if abs(j - i) <= r:
                    s += q[i, ch] * p[j - i + r, ch] * v[j, ch]
            out[i, ch] = s
    return out

"""Independent reference implementations used as test oracles.

Nothing here imports the code under test except for plain data types.
"""

from __future__ import annotations

import numpy as np


def conv2d_loops(x, w, b, stride, padding):
    """Direct six-loop cross-correlation in float64."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for i in range(n):
        for o in range(f):
            for r in range(oh):
                for s in range(ow):
                    patch = xp[i, :, r * stride : r * stride + kh, s * stride : s * stride + kw]
                    out[i, o, r, s] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


def central_difference(f, arrays, h=1e-3):
    """Gradient of scalar ``f(*arrays)`` w.r.t. every array, by central differences."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f(*arrays)
            a[i] = old - h
            down = f(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)


def brute_global_prune(layers, count):
    """Prune ``count`` unpruned weights with the smallest (|w|, layer, index) keys, by a full sort."""
    keys = []
    for li, (w, m) in enumerate(layers):
        for j in range(w.size):
            if m.flat[j]:
                keys.append((abs(float(w.flat[j])), li, j))
    keys.sort()
    return sorted((li, j) for _, li, j in keys[:count])


def brute_local_prune(layers, counts):
    out = []
    for li, ((w, m), k) in enumerate(zip(layers, counts)):
        keys = sorted((abs(float(w.flat[j])), j) for j in range(w.size) if m.flat[j])
        out.extend((li, j) for _, j in keys[:k])
    return sorted(out)


def spearman_ranks(values):
    """Average ranks (1-based) with ties sharing the mean rank."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    a, b = a - a.mean(), b - b.mean()
    return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))

"""Hot inner loops: im2col/col2im, max pooling and bilinear resizing.

Every kernel has a pure-numpy implementation and a numba ``@njit`` twin.
The numba path is used when numba imports cleanly and ``WT_NUMBA`` is not
set to ``0``. Both paths accumulate in the same order, so their results are
bitwise identical; ``tests/test_kernels.py`` holds them to that.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("WT_NUMBA", "1") != "0"


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def np_im2col(xpad, kh, kw, stride, oh, ow):
    n, c = xpad.shape[:2]
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def np_col2im(dcols, n, c, hp, wp, kh, kw, stride, oh, ow):
    d = dcols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out


def np_maxpool_fwd(x, k, stride, oh, ow):
    n, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, oh, ow, k * k)
    arg = np.argmax(flat, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    # translate window-local argmax to a flat index into the (H, W) plane
    ys = np.arange(oh)[:, None] * stride + arg // k
    xs = np.arange(ow)[None, :] * stride + arg % k
    idx = ys * x.shape[3] + xs
    return np.ascontiguousarray(out), idx.astype(np.int64)


def np_maxpool_bwd(g, idx, h, w):
    n, c = g.shape[:2]
    dx = np.zeros((n, c, h * w), dtype=g.dtype)
    rows = np.arange(n * c)[:, None]
    np.add.at(dx.reshape(n * c, h * w), (rows, idx.reshape(n * c, -1)), g.reshape(n * c, -1))
    return dx.reshape(n, c, h, w)


def _bilinear_coords(src, dst):
    # half-pixel centres; identical sizes give the identity map
    scale = src / dst
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def np_resize_bilinear(img, out_h, out_w):
    img = np.asarray(img, dtype=np.float64)
    y0, y1, fy = _bilinear_coords(img.shape[0], out_h)
    x0, x1, fx = _bilinear_coords(img.shape[1], out_w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _nb_im2col(xpad, kh, kw, stride, oh, ow):
        n, c = xpad.shape[0], xpad.shape[1]
        cols = np.empty((n * oh * ow, c * kh * kw), dtype=xpad.dtype)
        # one output column at a time: reads run along contiguous image rows
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        q = (ch * kh + i) * kw + j
                        for y in range(oh):
                            r = (b * oh + y) * ow
                            src = xpad[b, ch, y * stride + i]
                            for x in range(ow):
                                cols[r + x, q] = src[x * stride + j]
        return cols

    @njit(cache=True)
    def _nb_col2im(dcols, n, c, hp, wp, kh, kw, stride, oh, ow):
        out = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
        # (i, j) outermost to match the numpy accumulation order exactly
        for i in range(kh):
            for j in range(kw):
                for b in range(n):
                    for ch in range(c):
                        q = (ch * kh + i) * kw + j
                        for y in range(oh):
                            r = (b * oh + y) * ow
                            for x in range(ow):
                                out[b, ch, y * stride + i, x * stride + j] += dcols[r + x, q]
        return out

    @njit(cache=True)
    def _nb_maxpool_fwd(x, k, stride, oh, ow):
        n, c, w = x.shape[0], x.shape[1], x.shape[3]
        out = np.empty((n, c, oh, ow), dtype=x.dtype)
        idx = np.empty((n, c, oh, ow), dtype=np.int64)
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for xx in range(ow):
                        y0 = y * stride
                        x0 = xx * stride
                        best = x[b, ch, y0, x0]
                        bi = y0 * w + x0
                        for i in range(k):
                            for j in range(k):
                                v = x[b, ch, y0 + i, x0 + j]
                                if v > best:
                                    best = v
                                    bi = (y0 + i) * w + x0 + j
                        out[b, ch, y, xx] = best
                        idx[b, ch, y, xx] = bi
        return out, idx

    @njit(cache=True)
    def _nb_maxpool_bwd(g, idx, h, w):
        n, c, oh, ow = g.shape
        dx = np.zeros((n, c, h * w), dtype=g.dtype)
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for xx in range(ow):
                        dx[b, ch, idx[b, ch, y, xx]] += g[b, ch, y, xx]
        return dx.reshape(n, c, h, w)

    @njit(cache=True)
    def _nb_resize_bilinear(img, out_h, out_w):
        h, w = img.shape
        out = np.empty((out_h, out_w), dtype=np.float64)
        sy = h / out_h
        sx = w / out_w
        for y in range(out_h):
            py = min(max((y + 0.5) * sy - 0.5, 0.0), h - 1)
            y0 = int(np.floor(py))
            y1 = min(y0 + 1, h - 1)
            fy = py - y0
            for x in range(out_w):
                px = min(max((x + 0.5) * sx - 0.5, 0.0), w - 1)
                x0 = int(np.floor(px))
                x1 = min(x0 + 1, w - 1)
                fx = px - x0
                top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
                bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
                out[y, x] = top * (1 - fy) + bot * fy
        return out

    def nb_im2col(xpad, kh, kw, stride, oh, ow):
        return _nb_im2col(np.ascontiguousarray(xpad), kh, kw, stride, oh, ow)

    def nb_col2im(dcols, n, c, hp, wp, kh, kw, stride, oh, ow):
        return _nb_col2im(np.ascontiguousarray(dcols), n, c, hp, wp, kh, kw, stride, oh, ow)

    def nb_maxpool_fwd(x, k, stride, oh, ow):
        return _nb_maxpool_fwd(np.ascontiguousarray(x), k, stride, oh, ow)

    def nb_maxpool_bwd(g, idx, h, w):
        return _nb_maxpool_bwd(np.ascontiguousarray(g), np.ascontiguousarray(idx), h, w)

    def nb_resize_bilinear(img, out_h, out_w):
        return _nb_resize_bilinear(np.ascontiguousarray(img, dtype=np.float64), out_h, out_w)


if USE_NUMBA:
    im2col = nb_im2col
    col2im = nb_col2im
    maxpool_fwd = nb_maxpool_fwd
    maxpool_bwd = nb_maxpool_bwd
    resize_bilinear = nb_resize_bilinear
else:
    im2col = np_im2col
    col2im = np_col2im
    maxpool_fwd = np_maxpool_fwd
    maxpool_bwd = np_maxpool_bwd
    resize_bilinear = np_resize_bilinear

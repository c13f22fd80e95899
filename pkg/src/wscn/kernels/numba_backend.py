"""Numba direct-loop kernels.

Each kernel is a plain nested loop over a zero-padded input, jitted with
``@njit(cache=True)``. Loop bodies accumulate along contiguous rows so
LLVM can vectorize them. Padding and interior slicing happen in thin
python wrappers; the jitted cores only ever see padded arrays.

Accumulation order is fixed by the loop nest, so results are
bit-reproducible run to run (though not bit-identical to the numpy
backend, which sums taps in a different order).
"""

import numpy as np
from numba import njit


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


@njit(cache=True)
def _conv2d_fwd(xp, w, stride, oh, ow):
    n, c, _, _ = xp.shape
    oc, _, kh, kw = w.shape
    out = np.zeros((n, oc, oh, ow), dtype=xp.dtype)
    for i in range(n):
        for o in range(oc):
            for j in range(c):
                for u in range(kh):
                    for v in range(kw):
                        wv = w[o, j, u, v]
                        for y in range(oh):
                            xrow = xp[i, j, y * stride + u]
                            orow = out[i, o, y]
                            for x_ in range(ow):
                                orow[x_] += xrow[x_ * stride + v] * wv
    return out


@njit(cache=True)
def _conv2d_dx(gy, w, stride, hp, wp):
    n, oc, oh, ow = gy.shape
    _, c, kh, kw = w.shape
    dxp = np.zeros((n, c, hp, wp), dtype=gy.dtype)
    for i in range(n):
        for o in range(oc):
            for j in range(c):
                for u in range(kh):
                    for v in range(kw):
                        wv = w[o, j, u, v]
                        for y in range(oh):
                            grow = gy[i, o, y]
                            xrow = dxp[i, j, y * stride + u]
                            for x_ in range(ow):
                                xrow[x_ * stride + v] += grow[x_] * wv
    return dxp


@njit(cache=True)
def _conv2d_dw(xp, gy, stride, kh, kw):
    n, c, _, _ = xp.shape
    _, oc, oh, ow = gy.shape
    dw = np.zeros((oc, c, kh, kw), dtype=xp.dtype)
    for o in range(oc):
        for j in range(c):
            for u in range(kh):
                for v in range(kw):
                    acc = 0.0
                    for i in range(n):
                        for y in range(oh):
                            grow = gy[i, o, y]
                            xrow = xp[i, j, y * stride + u]
                            for x_ in range(ow):
                                acc += grow[x_] * xrow[x_ * stride + v]
                    dw[o, j, u, v] = acc
    return dw


@njit(cache=True)
def _depthwise_fwd(xp, w, oh, ow):
    n, c, _, _ = xp.shape
    _, kh, kw = w.shape
    out = np.zeros((n, c, oh, ow), dtype=xp.dtype)
    for i in range(n):
        for j in range(c):
            for u in range(kh):
                for v in range(kw):
                    wv = w[j, u, v]
                    for y in range(oh):
                        xrow = xp[i, j, y + u]
                        orow = out[i, j, y]
                        for x_ in range(ow):
                            orow[x_] += xrow[x_ + v] * wv
    return out


@njit(cache=True)
def _depthwise_dx(gy, w, hp, wp):
    n, c, oh, ow = gy.shape
    _, kh, kw = w.shape
    dxp = np.zeros((n, c, hp, wp), dtype=gy.dtype)
    for i in range(n):
        for j in range(c):
            for u in range(kh):
                for v in range(kw):
                    wv = w[j, u, v]
                    for y in range(oh):
                        grow = gy[i, j, y]
                        xrow = dxp[i, j, y + u]
                        for x_ in range(ow):
                            xrow[x_ + v] += grow[x_] * wv
    return dxp


@njit(cache=True)
def _depthwise_dw(xp, gy, kh, kw):
    n, c, oh, ow = gy.shape
    dw = np.zeros((c, kh, kw), dtype=xp.dtype)
    for j in range(c):
        for u in range(kh):
            for v in range(kw):
                acc = 0.0
                for i in range(n):
                    for y in range(oh):
                        grow = gy[i, j, y]
                        xrow = xp[i, j, y + u]
                        for x_ in range(ow):
                            acc += grow[x_] * xrow[x_ + v]
                dw[j, u, v] = acc
    return dw


@njit(cache=True)
def _maxpool2_fwd(x):
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    idx = np.empty((n, c, oh, ow), dtype=np.uint8)
    for i in range(n):
        for j in range(c):
            for y in range(oh):
                for x_ in range(ow):
                    best = x[i, j, 2 * y, 2 * x_]
                    k = 0
                    cand = x[i, j, 2 * y, 2 * x_ + 1]
                    if cand > best:
                        best, k = cand, 1
                    cand = x[i, j, 2 * y + 1, 2 * x_]
                    if cand > best:
                        best, k = cand, 2
                    cand = x[i, j, 2 * y + 1, 2 * x_ + 1]
                    if cand > best:
                        best, k = cand, 3
                    out[i, j, y, x_] = best
                    idx[i, j, y, x_] = k
    return out, idx


@njit(cache=True)
def _maxpool2_bwd(gy, idx):
    n, c, oh, ow = gy.shape
    dx = np.zeros((n, c, oh * 2, ow * 2), dtype=gy.dtype)
    for i in range(n):
        for j in range(c):
            for y in range(oh):
                for x_ in range(ow):
                    k = idx[i, j, y, x_]
                    dx[i, j, 2 * y + k // 2, 2 * x_ + k % 2] = gy[i, j, y, x_]
    return dx


def conv2d_fwd(x, w, stride, pad):
    n, c, h, wid = x.shape
    oc, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wid + 2 * pad - kw) // stride + 1
    return _conv2d_fwd(_pad(x, pad), np.ascontiguousarray(w), stride, oh, ow)


def conv2d_dx(gy, w, stride, pad, h, wid):
    dxp = _conv2d_dx(
        np.ascontiguousarray(gy), np.ascontiguousarray(w), stride,
        h + 2 * pad, wid + 2 * pad,
    )
    if pad == 0:
        return dxp
    return dxp[:, :, pad : pad + h, pad : pad + wid]


def conv2d_dw(x, gy, stride, pad, kh, kw):
    return _conv2d_dw(_pad(x, pad), np.ascontiguousarray(gy), stride, kh, kw)


def depthwise_fwd(x, w):
    _, _, h, wid = x.shape
    pad = (w.shape[1] - 1) // 2
    return _depthwise_fwd(_pad(x, pad), np.ascontiguousarray(w), h, wid)


def depthwise_dx(gy, w):
    _, _, h, wid = gy.shape
    pad = (w.shape[1] - 1) // 2
    dxp = _depthwise_dx(
        np.ascontiguousarray(gy), np.ascontiguousarray(w),
        h + 2 * pad, wid + 2 * pad,
    )
    if pad == 0:
        return dxp
    return dxp[:, :, pad : pad + h, pad : pad + wid]


def depthwise_dw(x, gy, kh, kw):
    pad = (kh - 1) // 2
    return _depthwise_dw(_pad(x, pad), np.ascontiguousarray(gy), kh, kw)


def maxpool2_fwd(x):
    return _maxpool2_fwd(np.ascontiguousarray(x))


def maxpool2_bwd(gy, idx):
    return _maxpool2_bwd(np.ascontiguousarray(gy), idx)

"""Pure-numpy kernels: convolutions as nine shifted BLAS matmuls.

A KxK convolution is a sum over kernel taps (u, v) of a 1x1 convolution
between the input shifted by (u, v) and the tap's weight matrix. Each
1x1 convolution is a (OC, C) x (C, OH*OW) matmul batched over N, which
numpy hands to BLAS. The backward passes reuse the same decomposition
with the roles of the operands swapped.
"""

import numpy as np


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_fwd(x, w, stride, pad):
    n, c, h, wid = x.shape
    oc, _, kh, kw = w.shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(wid, kw, stride, pad)
    xp = _pad(x, pad)
    out = np.zeros((n, oc, oh * ow), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u : u + stride * (oh - 1) + 1 : stride,
                    v : v + stride * (ow - 1) + 1 : stride]
            xs = np.ascontiguousarray(xs).reshape(n, c, oh * ow)
            out += np.matmul(w[:, :, u, v], xs)
    return out.reshape(n, oc, oh, ow)


def conv2d_dx(gy, w, stride, pad, h, wid):
    n, oc, oh, ow = gy.shape
    _, c, kh, kw = w.shape
    dxp = np.zeros((n, c, h + 2 * pad, wid + 2 * pad), dtype=gy.dtype)
    gy_flat = gy.reshape(n, oc, oh * ow)
    for u in range(kh):
        for v in range(kw):
            contrib = np.matmul(w[:, :, u, v].T, gy_flat).reshape(n, c, oh, ow)
            dxp[:, :, u : u + stride * (oh - 1) + 1 : stride,
                v : v + stride * (ow - 1) + 1 : stride] += contrib
    if pad == 0:
        return dxp
    return dxp[:, :, pad : pad + h, pad : pad + wid]


def conv2d_dw(x, gy, stride, pad, kh, kw):
    n, c, h, wid = x.shape
    _, oc, oh, ow = gy.shape
    xp = _pad(x, pad)
    dw = np.empty((oc, c, kh, kw), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u : u + stride * (oh - 1) + 1 : stride,
                    v : v + stride * (ow - 1) + 1 : stride]
            dw[:, :, u, v] = np.tensordot(gy, xs, axes=([0, 2, 3], [0, 2, 3]))
    return dw


def depthwise_fwd(x, w):
    n, c, h, wid = x.shape
    _, kh, kw = w.shape
    pad = (kh - 1) // 2
    xp = _pad(x, pad)
    out = np.zeros_like(x)
    for u in range(kh):
        for v in range(kw):
            out += xp[:, :, u : u + h, v : v + wid] * w[None, :, u, v, None, None]
    return out


def depthwise_dx(gy, w):
    n, c, h, wid = gy.shape
    _, kh, kw = w.shape
    pad = (kh - 1) // 2
    dxp = np.zeros((n, c, h + 2 * pad, wid + 2 * pad), dtype=gy.dtype)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u : u + h, v : v + wid] += gy * w[None, :, u, v, None, None]
    return dxp[:, :, pad : pad + h, pad : pad + wid]


def depthwise_dw(x, gy, kh, kw):
    n, c, h, wid = x.shape
    pad = (kh - 1) // 2
    xp = _pad(x, pad)
    dw = np.empty((c, kh, kw), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            dw[:, u, v] = np.einsum(
                "nchw,nchw->c", xp[:, :, u : u + h, v : v + wid], gy, optimize=True
            )
    return dw


def maxpool2_fwd(x):
    n, c, h, wid = x.shape
    win = (
        x.reshape(n, c, h // 2, 2, wid // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, wid // 2, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.uint8)


def maxpool2_bwd(gy, idx):
    n, c, oh, ow = gy.shape
    dwin = np.zeros((n, c, oh, ow, 4), dtype=gy.dtype)
    np.put_along_axis(dwin, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    return (
        dwin.reshape(n, c, oh, ow, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh * 2, ow * 2)
    )

"""Neural-net ops on Tensors: convolutions, norm, pooling, activations.

Every op validates shapes up front, computes forward through the active
kernel backend, and registers a backward closure on the active tape.
Layouts are NCHW row-major throughout; dense weights are [in, out].
"""

import numpy as np

from . import kernels as K
from .errors import ConfigError, ShapeError
from .tensor import Tensor, record


def _resolve_pad(padding, kh, kw):
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"'same' padding needs odd kernel sides, got {kh}x{kw}")
        return (kh - 1) // 2
    pad = int(padding)
    if pad < 0:
        raise ShapeError(f"padding must be >= 0, got {pad}")
    return pad


def conv2d(x, w, b=None, stride=1, padding="same"):
    """Cross-correlation of x (N,C,H,W) with w (OC,C,KH,KW), plus bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D tensors, got x{x.shape} w{w.shape}")
    n, c, h, wid = x.shape
    oc, wc, kh, kw = w.shape
    if wc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {wc}")
    if b is not None and b.shape != (oc,):
        raise ShapeError(f"conv2d bias must be ({oc},), got {b.shape}")
    pad = _resolve_pad(padding, kh, kw)
    if h + 2 * pad < kh or wid + 2 * pad < kw:
        raise ShapeError(f"conv2d input {h}x{wid} too small for {kh}x{kw} kernel")
    out_data = K.conv2d_fwd(x.data, w.data, stride, pad)
    if b is not None:
        out_data += b.data[None, :, None, None]
    out = Tensor(out_data)
    inputs = (x, w) if b is None else (x, w, b)

    def make_backward(needs):
        def backward_fn(g):
            gx = K.conv2d_dx(g, w.data, stride, pad, h, wid) if needs[0] else None
            gw = K.conv2d_dw(x.data, g, stride, pad, kh, kw) if needs[1] else None
            if b is None:
                return gx, gw
            gb = g.sum(axis=(0, 2, 3)) if needs[2] else None
            return gx, gw, gb

        return backward_fn

    return record(out, inputs, make_backward)


def depthwise_conv2d(x, w):
    """Per-channel 3x3 correlation, stride 1, same padding. w is (C,1,KH,KW)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != 1:
        raise ShapeError(f"depthwise expects x(N,C,H,W), w(C,1,KH,KW); got {x.shape}, {w.shape}")
    n, c, h, wid = x.shape
    if w.shape[0] != c:
        raise ShapeError(f"depthwise channel mismatch: {c} vs {w.shape[0]}")
    kh, kw = w.shape[2], w.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"depthwise kernel sides must be odd, got {kh}x{kw}")
    wk = w.data.reshape(c, kh, kw)
    out = Tensor(K.depthwise_fwd(x.data, wk))

    def make_backward(needs):
        def backward_fn(g):
            gx = K.depthwise_dx(g, wk) if needs[0] else None
            gw = (
                K.depthwise_dw(x.data, g, kh, kw).reshape(w.shape)
                if needs[1]
                else None
            )
            return gx, gw

        return backward_fn

    return record(out, (x, w), make_backward)


def separable_conv2d(x, depthwise, pointwise, bias=None):
    """Depthwise 3x3 followed by a 1x1 mixing conv. Exactly the composition."""
    h = depthwise_conv2d(x, depthwise)
    return conv2d(h, pointwise, bias, stride=1, padding=0)


def transpose_conv2d(x, w, stride=2):
    """Stride-s upsampling conv; output is exactly (N, OC, s*H, s*W).

    w is laid out (C, OC, KH, KW). The forward pass is the adjoint of a
    stride-s conv with the same kernel, i.e. <transpose_conv2d(x), y>
    equals <x, conv2d(y, w, stride=s)> for all y.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"transpose_conv2d expects 4-D tensors, got {x.shape}, {w.shape}")
    n, c, h, wid = x.shape
    wc, oc, kh, kw = w.shape
    if wc != c:
        raise ShapeError(f"transpose_conv2d channel mismatch: input {c}, kernel {wc}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"transpose_conv2d kernel must be square and odd, got {kh}x{kw}")
    pad = (kh - 1) // 2
    oh, ow = stride * h, stride * wid
    if (oh + 2 * pad - kh) // stride + 1 != h:
        raise ShapeError(
            f"transpose_conv2d: kernel {kh} and stride {stride} cannot produce {oh}x{ow}"
        )
    out = Tensor(K.conv2d_dx(x.data, w.data, stride, pad, oh, ow))

    def make_backward(needs):
        def backward_fn(g):
            gx = K.conv2d_fwd(g, w.data, stride, pad) if needs[0] else None
            gw = K.conv2d_dw(g, x.data, stride, pad, kh, kw) if needs[1] else None
            return gx, gw

        return backward_fn

    return record(out, (x, w), make_backward)


def batch_norm(x, gamma, beta, running_mean, running_var, *, training,
               momentum=0.1, eps=1e-5):
    """Per-channel batch norm over (N, H, W).

    Training mode normalizes with biased batch statistics and folds them
    into the running buffers in place: run = (1-momentum)*run + momentum*batch.
    Eval mode is a pure affine map using the running buffers.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm {name} must be ({c},), got {arr.shape}")
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.copy()
        var = running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    mu4 = mu[None, :, None, None]
    inv4 = inv[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * ((x.data - mu4) * inv4)
                 + beta.data[None, :, None, None])

    def make_backward(needs):
        def backward_fn(g):
            xhat = (x.data - mu4) * inv4
            ggamma = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
            gbeta = g.sum(axis=(0, 2, 3)) if needs[2] else None
            if not needs[0]:
                return None, ggamma, gbeta
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                gx = inv4 * (
                    gxhat
                    - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = gxhat * inv4
            return gx, ggamma, gbeta

        return backward_fn

    return record(out, (x, gamma, beta), make_backward)


def max_pool2(x):
    """2x2 max pool, stride 2. Ties resolve to the first window element."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2 expects (N,C,H,W), got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {x.shape}")
    out_data, idx = K.maxpool2_fwd(x.data)
    out = Tensor(out_data)

    def make_backward(needs):
        return lambda g: (K.maxpool2_bwd(g, idx),)

    return record(out, (x,), make_backward)


def avg_pool2(x):
    """2x2 average pool, stride 2."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2 expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    out = Tensor(x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)))

    def make_backward(needs):
        def backward_fn(g):
            up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
            return (up * np.asarray(0.25, dtype=x.dtype),)

        return backward_fn

    return record(out, (x,), make_backward)


def global_avg_pool(x):
    """Spatial mean: (N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def make_backward(needs):
        scale = 1.0 / (h * w)

        def backward_fn(g):
            gx = np.broadcast_to(g[:, :, None, None] * np.asarray(scale, x.dtype),
                                 x.shape)
            return (gx.astype(x.dtype, copy=True),)

        return backward_fn

    return record(out, (x,), make_backward)


def dense(x, w, b=None):
    """Affine map x @ w + b with x (N,F) and w (F,U)."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"dense expects 2-D tensors, got x{x.shape} w{w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense feature mismatch: x{x.shape} w{w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias must be ({w.shape[1]},), got {b.shape}")
    out_data = x.data @ w.data
    if b is not None:
        out_data += b.data
    out = Tensor(out_data)
    inputs = (x, w) if b is None else (x, w, b)

    def make_backward(needs):
        def backward_fn(g):
            gx = g @ w.data.T if needs[0] else None
            gw = x.data.T @ g if needs[1] else None
            if b is None:
                return gx, gw
            gb = g.sum(axis=0) if needs[2] else None
            return gx, gw, gb

        return backward_fn

    return record(out, inputs, make_backward)


def relu(x):
    out = Tensor(np.maximum(x.data, 0))

    def make_backward(needs):
        mask = x.data > 0
        return lambda g: (g * mask,)

    return record(out, (x,), make_backward)


def sigmoid(x):
    with np.errstate(over="ignore"):
        out = Tensor(1.0 / (1.0 + np.exp(-x.data)))

    def make_backward(needs):
        return lambda g: (g * (out.data * (1.0 - out.data)),)

    return record(out, (x,), make_backward)


def softmax(x):
    """Softmax along the last axis, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))

    def make_backward(needs):
        def backward_fn(g):
            y = out.data
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return backward_fn

    return record(out, (x,), make_backward)


def dropout(x, rate, *, training, rng=None):
    """Inverted dropout: zero with probability ``rate``, scale by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    mask = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    out = Tensor(x.data * mask * scale)

    def make_backward(needs):
        return lambda g: (g * mask * scale,)

    return record(out, (x,), make_backward)


def concat_channels(a, b):
    """Concatenate along the channel axis of NCHW tensors."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels expects 4-D tensors, got {a.shape}, {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching N/H/W: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate((a.data, b.data), axis=1))

    def make_backward(needs):
        def backward_fn(g):
            ga = g[:, :ca] if needs[0] else None
            gb = g[:, ca:] if needs[1] else None
            return ga, gb

        return backward_fn

    return record(out, (a, b), make_backward)


def l2_normalize(x, eps=1e-12):
    """Row-wise projection of (N,D) onto the unit sphere."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize expects (N,D), got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True) + eps)
    out = Tensor(x.data / norm)

    def make_backward(needs):
        def backward_fn(g):
            y = out.data
            return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

        return backward_fn

    return record(out, (x,), make_backward)

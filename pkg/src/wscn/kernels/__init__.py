"""Hot convolution/pooling kernels with selectable backends.

Two interchangeable implementations live here:

* ``numpy_backend`` decomposes each convolution into nine shifted
  BLAS matmuls (one per 3x3 tap). On a single core this is usually the
  fastest option because the work lands in sgemm.
* ``numba_backend`` carries ``@njit`` direct-loop kernels. Worth trying
  on machines with many cores or when BLAS is weak; compare the two with
  ``benchmarks/backend_bench.py``.

The active backend is chosen once at import from the ``WSCN_BACKEND``
environment variable (``numpy`` or ``numba``; unset means numpy).

Kernel contract (shared by both backends, dtype-preserving):

    conv2d_fwd(x, w, stride, pad)            x (N,C,H,W), w (OC,C,KH,KW)
    conv2d_dx(gy, w, stride, pad, h, w)      gradient wrt x
    conv2d_dw(x, gy, stride, pad, kh, kw)    gradient wrt w
    depthwise_fwd(x, w)                      w (C,KH,KW), stride 1, same pad
    depthwise_dx(gy, w)
    depthwise_dw(x, gy, kh, kw)
    maxpool2_fwd(x) -> (out, idx)            2x2/stride 2, idx uint8 in [0,4)
    maxpool2_bwd(gy, idx) -> dx

Ties in maxpool2 go to the first window element in row-major order.
"""

import os

from ..errors import ConfigError

_KERNEL_NAMES = (
    "conv2d_fwd",
    "conv2d_dx",
    "conv2d_dw",
    "depthwise_fwd",
    "depthwise_dx",
    "depthwise_dw",
    "maxpool2_fwd",
    "maxpool2_bwd",
)


def _resolve():
    flag = os.environ.get("WSCN_BACKEND", "").strip().lower()
    if flag in ("", "numpy"):
        from . import numpy_backend

        return "numpy", numpy_backend
    if flag == "numba":
        try:
            from . import numba_backend
        except ImportError as exc:
            raise ConfigError(
                "WSCN_BACKEND=numba but the numba package is not importable; "
                "install it or unset the flag"
            ) from exc
        return "numba", numba_backend
    raise ConfigError(f"unknown WSCN_BACKEND value {flag!r}; use 'numpy' or 'numba'")


BACKEND, _impl = _resolve()

conv2d_fwd = _impl.conv2d_fwd
conv2d_dx = _impl.conv2d_dx
conv2d_dw = _impl.conv2d_dw
depthwise_fwd = _impl.depthwise_fwd
depthwise_dx = _impl.depthwise_dx
depthwise_dw = _impl.depthwise_dw
maxpool2_fwd = _impl.maxpool2_fwd
maxpool2_bwd = _impl.maxpool2_bwd

__all__ = ["BACKEND", *_KERNEL_NAMES]

"""Post-training INT8 quantization.

Weights of convolution, transpose-convolution, and dense layers (and
their biases) are quantized per-tensor with an asymmetric affine map

    q = clip(round(x / scale) + zero_point, -128, 127)

where scale = (max - min) / 255 over a range widened to include zero.
Batch-norm parameters and running statistics stay float32: they are a
few hundred values and folding them into int8 costs accuracy for no
meaningful size win.

Activation ranges come from a calibration pass that observes every
forward hook site over representative data. Quantized inference is
simulated: weights are dequantized once, and each activation is passed
through its quantize/dequantize pair at the recorded sites, so the
reported accuracy reflects exactly the int8 value grid that
:func:`export_quantized` stores on disk.
"""

import copy
from dataclasses import dataclass

import numpy as np

from . import model as M
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import QuantError
from .tensor import Tensor

QMIN, QMAX = -128, 127
_DEGENERATE_PAD = 1e-3


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    lo: float
    hi: float

    def as_tuple(self):
        return (self.scale, self.zero_point, self.lo, self.hi)


def compute_qparams(lo, hi):
    """Affine parameters for the value range [lo, hi].

    The range is widened to include zero (so zero quantizes exactly)
    and padded when degenerate.
    """
    lo = float(min(lo, 0.0))
    hi = float(max(hi, 0.0))
    if hi - lo < 1e-12:
        lo -= _DEGENERATE_PAD
        hi += _DEGENERATE_PAD
    scale = (hi - lo) / (QMAX - QMIN)
    zero_point = int(np.clip(np.rint(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(scale=scale, zero_point=zero_point, lo=lo, hi=hi)


def quantize(arr, qp):
    q = np.rint(np.asarray(arr, dtype=np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize(q, qp, dtype=np.float32):
    return ((q.astype(np.float64) - qp.zero_point) * qp.scale).astype(dtype)


def _is_quantizable(name):
    # everything except batch-norm affine parameters
    return not (name.endswith(".gamma") or name.endswith(".beta"))


class RangeObserver:
    """Forward hook that records per-site activation min/max."""

    def __init__(self):
        self.ranges = {}

    def __call__(self, name, arr):
        lo = float(arr.min())
        hi = float(arr.max())
        if name in self.ranges:
            old_lo, old_hi = self.ranges[name]
            self.ranges[name] = (min(old_lo, lo), max(old_hi, hi))
        else:
            self.ranges[name] = (lo, hi)
        return arr


class FakeQuantHook:
    """Forward hook that rounds every activation onto its int8 grid."""

    def __init__(self, act_qparams):
        self.act_qparams = act_qparams

    def __call__(self, name, arr):
        qp = self.act_qparams.get(name)
        if qp is None:
            raise QuantError(
                f"no calibrated range for activation site {name!r}; "
                "re-run calibration on a model with the same architecture"
            )
        return dequantize(quantize(arr, qp), qp, arr.dtype)


def calibrate(mdl, images, batch_size=32):
    """Observe activation ranges over (N,1,S,S) images; returns
    site name -> QuantParams."""
    observer = RangeObserver()
    n = len(images)
    for start in range(0, n, batch_size):
        x = Tensor(np.asarray(images[start : start + batch_size], dtype=mdl.np_dtype))
        M.forward(mdl, x, training=False, hook=observer)
    if not observer.ranges:
        raise QuantError("calibration saw no activations (empty image set)")
    return {name: compute_qparams(lo, hi) for name, (lo, hi) in observer.ranges.items()}


@dataclass
class QuantizedModel:
    config: "M.WscnConfig"
    weights_q: dict       # name -> int8 ndarray
    weight_qparams: dict  # name -> QuantParams
    float_arrays: dict    # batch-norm params and buffers, float32
    act_qparams: dict     # hook site -> QuantParams

    def __post_init__(self):
        self._runtime = None

    def runtime_model(self):
        """Float model whose weights sit exactly on the int8 grid."""
        if self._runtime is None:
            m = M.build_model(self.config)
            state = dict(self.float_arrays)
            for name, q in self.weights_q.items():
                state[name] = dequantize(q, self.weight_qparams[name], m.np_dtype)
            m.load_state_arrays(state)
            self._runtime = m
        return self._runtime


def quantize_model(mdl, calib_images, batch_size=32):
    """Quantize a trained model, calibrating activations on the given
    images. Returns a QuantizedModel."""
    act_qparams = calibrate(mdl, calib_images, batch_size)
    weights_q = {}
    weight_qparams = {}
    float_arrays = {}
    for name, p in mdl.params.items():
        if _is_quantizable(name):
            qp = compute_qparams(p.data.min(), p.data.max())
            weights_q[name] = quantize(p.data, qp)
            weight_qparams[name] = qp
        else:
            float_arrays[name] = p.data.astype(np.float32)
    for name, b in mdl.buffers.items():
        float_arrays[name] = b.astype(np.float32)
    return QuantizedModel(
        config=copy.deepcopy(mdl.config),
        weights_q=weights_q,
        weight_qparams=weight_qparams,
        float_arrays=float_arrays,
        act_qparams=act_qparams,
    )


def quantized_forward(qm, x, *, hook=None):
    """Int8-simulated forward pass: int8-grid weights, int8-grid
    activations at every calibrated site."""
    if hook is not None:
        raise QuantError("quantized_forward installs its own hook")
    m = qm.runtime_model()
    return M.forward(m, x, training=False, hook=FakeQuantHook(qm.act_qparams))


def export_quantized(path, qm):
    """Write the int8 model to disk; returns the file size in bytes."""
    arrays = dict(qm.weights_q)
    arrays.update(qm.float_arrays)
    qparams = {f"w:{n}": qp.as_tuple() for n, qp in qm.weight_qparams.items()}
    qparams.update(
        {f"act:{n}": qp.as_tuple() for n, qp in qm.act_qparams.items()}
    )
    meta = {"kind": "wscn-int8", "config": qm.config.to_dict()}
    return save_checkpoint(path, arrays, meta=meta, qparams=qparams)


def load_quantized(path):
    """Read a quantized model written by :func:`export_quantized`."""
    arrays, meta, qparams = load_checkpoint(path)
    if meta.get("kind") != "wscn-int8":
        raise QuantError(f"not a quantized model file: kind={meta.get('kind')!r}")
    config = M.WscnConfig.from_dict(meta["config"])
    weights_q = {}
    float_arrays = {}
    for name, arr in arrays.items():
        if arr.dtype == np.int8:
            weights_q[name] = arr
        else:
            float_arrays[name] = arr
    weight_qparams = {}
    act_qparams = {}
    for key, tup in qparams.items():
        kind, _, name = key.partition(":")
        qp = QuantParams(scale=tup[0], zero_point=int(tup[1]), lo=tup[2], hi=tup[3])
        if kind == "w":
            weight_qparams[name] = qp
        elif kind == "act":
            act_qparams[name] = qp
        else:
            raise QuantError(f"unrecognized quant-param key {key!r}")
    missing = set(weights_q) - set(weight_qparams)
    if missing:
        raise QuantError(f"int8 tensors without scale entries: {sorted(missing)[:3]}")
    return QuantizedModel(
        config=config,
        weights_q=weights_q,
        weight_qparams=weight_qparams,
        float_arrays=float_arrays,
        act_qparams=act_qparams,
    )

"""Reverse-mode autodiff on numpy arrays.

A ``Tensor`` wraps a float ndarray. Ops executed while a ``Tape`` is
active append one node each, in creation order; since every input to a
node must already exist, creation order is a topological order, and
``backward`` walks it once in reverse. Gradients from fan-out accumulate
additively. Only generic math lives here; the nn vocabulary (conv,
batch norm, pooling, ...) is in :mod:`wscn.ops` and records onto the
same tape.
"""

import numpy as np

from .errors import ShapeError, TapeError

_ACTIVE_TAPE = None


class Tensor:
    """Immutable-by-convention array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    # make `ndarray <op> Tensor` defer to our reflected operators instead
    # of numpy trying to consume the Tensor itself
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap ndarrays or scalars, not Tensors")
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """A Tensor sharing this data but cut out of the graph."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        if self.name:
            tag += f", name={self.name!r}"
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Records ops for one forward pass. Single-threaded, non-reentrant."""

    def __init__(self):
        self.nodes = []
        self._produced = set()

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def watches(self, t):
        return id(t) in self._produced

    def _record(self, output, inputs, backward_fn):
        self.nodes.append(_Node(output, inputs, backward_fn))
        self._produced.add(id(output))


def active_tape():
    return _ACTIVE_TAPE


def _needs_grad(tape, t):
    return t.requires_grad or tape.watches(t)


def record(output, inputs, make_backward):
    """Attach ``output`` to the active tape if any input participates.

    ``make_backward(needs)`` receives a tuple of booleans (one per
    input: does that input need a gradient?) and returns the backward
    closure ``g -> tuple[grad or None, ...]``. Building the closure
    lazily lets ops skip saving buffers on untaped forward passes.
    """
    tape = _ACTIVE_TAPE
    if tape is None:
        return output
    needs = tuple(_needs_grad(tape, t) for t in inputs)
    if any(needs):
        tape._record(output, inputs, make_backward(needs))
    return output


def backward(tape, loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf on the tape."""
    if not isinstance(loss, Tensor):
        raise TapeError("backward target must be a Tensor")
    if loss.size != 1:
        raise TapeError(
            f"backward target must be scalar, got shape {loss.shape}"
        )
    if not tape.watches(loss):
        raise TapeError(
            f"tensor {loss.name or '<unnamed>'} was not produced on this tape"
        )
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.backward_fn(g_out)):
            if g is None or not _needs_grad(tape, t):
                continue
            acc = grads.get(id(t))
            grads[id(t)] = g if acc is None else acc + g
    for node in tape.nodes:
        for t in node.inputs:
            if not t.requires_grad or tape.watches(t):
                continue
            g = grads.get(id(t))
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
            grads[id(t)] = None  # leaf reached via several nodes: add once


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, fwd, da, db):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = Tensor(fwd(a.data, b.data))

    def make_backward(needs):
        def backward_fn(g):
            ga = _unbroadcast(da(g, a.data, b.data), a.shape) if needs[0] else None
            gb = _unbroadcast(db(g, a.data, b.data), b.shape) if needs[1] else None
            return ga, gb

        return backward_fn

    return record(out, (a, b), make_backward)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(
        a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def div(a, b):
    return _binary(
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def make_backward(needs):
        def backward_fn(g):
            ga = g @ b.data.T if needs[0] else None
            gb = a.data.T @ g if needs[1] else None
            return ga, gb

        return backward_fn

    return record(out, (a, b), make_backward)


def transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T.copy())

    def make_backward(needs):
        return lambda g: (g.T,)

    return record(out, (a,), make_backward)


def exp(a):
    out = Tensor(np.exp(a.data))

    def make_backward(needs):
        return lambda g: (g * out.data,)

    return record(out, (a,), make_backward)


def log(a):
    out = Tensor(np.log(a.data))

    def make_backward(needs):
        return lambda g: (g / a.data,)

    return record(out, (a,), make_backward)


def sqrt(a):
    out = Tensor(np.sqrt(a.data))

    def make_backward(needs):
        return lambda g: (g * (0.5 / out.data),)

    return record(out, (a,), make_backward)


def clip(a, lo, hi):
    """Clamp values; gradient passes only strictly inside (lo, hi)."""
    out = Tensor(np.clip(a.data, lo, hi))

    def make_backward(needs):
        inside = ((a.data > lo) & (a.data < hi)).astype(a.dtype)
        return lambda g: (g * inside,)

    return record(out, (a,), make_backward)


def tsum(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def make_backward(needs):
        def backward_fn(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

        return backward_fn

    return record(out, (a,), make_backward)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)

"""Dense tensors with taped reverse-mode differentiation.

The engine is deliberately small: it covers exactly the operator set the
fusion model needs. Values are numpy arrays (float32 by default, float64
selectable for gradient checks). Gradients are recorded on an explicit
``Tape``: ops executed while a tape is active append a backward rule, and
``Tape.backward(loss)`` replays the rules in reverse execution order, which
is a valid topological order of the recorded graph.
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float32


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(EngineError):
    """Operand shapes violate an operator's contract."""


class NonFiniteError(EngineError):
    """An operation produced NaN or Inf."""


class TapeError(EngineError):
    """Tape misuse: consumed twice, nested, or backward from a non-scalar."""


def _as_dtype(data, dtype):
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    if isinstance(data, np.floating):
        # reductions over every axis hand back numpy scalars; keep their width
        return np.asarray(data)
    return np.asarray(data, dtype=DEFAULT_DTYPE)


class Tensor:
    """n-dimensional real array, optionally tracked for gradients.

    ``grad`` is populated by ``Tape.backward`` and holds an array of the
    same shape and dtype as ``data``. Tensors returned by operators under
    an active tape have ``requires_grad`` set when any input requires it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op_output")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_dtype(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op_output = False

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
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; the module-level functions are the canonical ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


# ---------------------------------------------------------------------------
# tape


_ACTIVE = threading.local()


def active_tape():
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Ordered record of executed operations for one forward pass.

    Single-owner: a tape must not be shared across concurrent executions.
    ``backward`` may be called once; ``clear`` drops all recorded
    intermediates and makes the tape reusable.
    """

    def __init__(self):
        self._nodes = []  # (output tensor, backward rule)
        self.consumed = False

    def __enter__(self):
        if active_tape() is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.tape = None
        return False

    def __len__(self):
        return len(self._nodes)

    def clear(self):
        self._nodes.clear()
        self.consumed = False

    def backward(self, loss):
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor with
        ``requires_grad`` that fed the recorded graph.

        Intermediate gradients are freed as soon as their producing node
        has been replayed; the node list itself is cleared at the end.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, rule in reversed(self._nodes):
            grad_out = out.grad
            if grad_out is None:
                continue
            for tensor, grad in rule(grad_out):
                if grad is None or not tensor.requires_grad:
                    continue
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad
            if out._op_output:
                out.grad = None
        self._nodes.clear()


def backward(loss, tape):
    """Run reverse-mode accumulation of ``loss`` over ``tape``."""
    tape.backward(loss)


def record(out, inputs, rule):
    """Attach a backward rule to ``out`` if a tape is active and any input
    participates in differentiation. Returns ``out``."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op_output = True
        tape._nodes.append((out, rule))
    return out


# ---------------------------------------------------------------------------
# finite guard

# isfinite(sum(x)) detects any NaN/Inf in one vectorized pass: NaN poisons the
# sum, a lone Inf survives it. Cheaper than isfinite(x).all() on large arrays.
def check_finite(data, op_name):
    if not np.isfinite(np.sum(data)):
        raise NonFiniteError(f"{op_name} produced non-finite values")
    return data


# ---------------------------------------------------------------------------
# broadcasting helpers


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` — the adjoint of numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(check_finite(a.data + b.data, "add"))

    def rule(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return record(out, (a, b), rule)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(check_finite(a.data - b.data, "sub"))

    def rule(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return record(out, (a, b), rule)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(check_finite(a.data * b.data, "mul"))

    def rule(g):
        return [
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        ]

    return record(out, (a, b), rule)


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)

    def rule(g):
        return [(a, -g)]

    return record(out, (a,), rule)


def power(a, exponent):
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    a = as_tensor(a)
    out = Tensor(check_finite(a.data**exponent, "power"))

    def rule(g):
        return [(a, g * exponent * a.data ** (exponent - 1))]

    return record(out, (a,), rule)


# ---------------------------------------------------------------------------
# structural ops (cannot create non-finite values; no guard)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    orig = a.shape

    def rule(g):
        return [(a, g.reshape(orig))]

    return record(out, (a,), rule)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        pieces = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(idx)]))
        return pieces

    return record(out, tuple(tensors), rule)


def narrow(a, axis, start, length):
    """Contiguous slice of ``length`` elements along ``axis``."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx])

    def rule(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return [(a, full)]

    return record(out, (a,), rule)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = Tensor(check_finite(a.data.sum(axis=axes, keepdims=keepdims), "sum"))
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def rule(g):
        return [(a, np.broadcast_to(g.reshape(kept), a.shape).copy())]

    return record(out, (a,), rule)


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = Tensor(check_finite(a.data.mean(axis=axes, keepdims=keepdims), "mean"))
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    inv = 1.0 / count

    def rule(g):
        return [(a, np.broadcast_to(g.reshape(kept) * inv, a.shape).astype(g.dtype))]

    return record(out, (a,), rule)

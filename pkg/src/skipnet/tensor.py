"""Dense float64 tensors (rank 1 or 2) with reverse-mode autodiff on a tape.

Operations record backward rules onto the active ``Tape`` (entered as a
context manager) whenever gradients can flow.  Outside a tape everything
runs in plain numpy, so inference and finite-difference evaluation pay no
recording overhead.  Sequences are represented upstream as time-major
lists of matrices, which keeps this kernel at rank <= 2.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DimensionError

_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tensor:
    """Row-major float64 array of rank 1 or 2 with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim not in (1, 2):
            raise DimensionError(f"tensors are rank 1 or 2, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive ops; replayed in reverse by ``backward``."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if _active_tape() is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def backward(self, loss):
        backward(self, loss)


def _record(out, inputs, backward_fn):
    out.is_leaf = False
    if out.requires_grad:
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def _result(data, requires_grad):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = requires_grad
    t.grad = None
    t.is_leaf = True
    return t


def backward(tape, loss, into=None):
    """Accumulate d(loss)/d(leaf) for every requires_grad leaf on the tape.

    By default gradients accumulate into each leaf's ``grad`` slot, and
    repeated calls without zeroing keep accumulating.  When ``into`` is a
    dict the leaves are left untouched and gradients are collected there
    (keyed by the leaf tensor), which lets parallel workers hand their
    results to a single writer.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward needs a scalar (single-element) loss tensor")
    grads = {id(loss): [loss, np.ones_like(loss.data)]}
    for node in reversed(tape.nodes):
        entry = grads.pop(id(node.output), None)
        if entry is None:
            continue
        input_grads = node.backward_fn(entry[1])
        for inp, g in zip(node.inputs, input_grads):
            if g is None or not inp.requires_grad:
                continue
            held = grads.get(id(inp))
            if held is None:
                grads[id(inp)] = [inp, np.array(g, copy=True)]
            else:
                held[1] = held[1] + g
    for tensor, g in grads.values():
        if tensor.is_leaf and tensor.requires_grad:
            if into is None:
                tensor.accumulate_grad(g)
            elif tensor in into:
                into[tensor] += g
            else:
                into[tensor] = g
    return into


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {tuple(a.shape)} x {tuple(b.shape)}")
    out = _result(a.data @ b.data, a.requires_grad or b.requires_grad)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), bw)


def concat(a, b, axis=0):
    if a.data.ndim != b.data.ndim:
        raise DimensionError(f"concat rank mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    other = 1 - axis
    if a.data.ndim == 2 and a.shape[other] != b.shape[other]:
        raise DimensionError(f"concat shapes incompatible along axis {axis}: "
                             f"{tuple(a.shape)} vs {tuple(b.shape)}")
    if a.data.ndim == 1 and axis != 0:
        raise DimensionError("rank-1 concat only supports axis 0")
    out = _result(np.concatenate((a.data, b.data), axis=axis), a.requires_grad or b.requires_grad)
    split = a.shape[axis]

    def bw(g):
        if axis == 0:
            return g[:split], g[split:]
        return g[:, :split], g[:, split:]

    return _record(out, (a, b), bw)


def add(a, b):
    """Elementwise sum; also supports adding a rank-1 bias to every matrix row."""
    if a.shape == b.shape:
        out = _result(a.data + b.data, a.requires_grad or b.requires_grad)

        def bw(g):
            return g, g

    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        out = _result(a.data + b.data, a.requires_grad or b.requires_grad)

        def bw(g):
            return g, g.sum(axis=0)

    else:
        raise DimensionError(f"add shapes incompatible: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _record(out, (a, b), bw)


def sub(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes incompatible: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = _result(a.data - b.data, a.requires_grad or b.requires_grad)

    def bw(g):
        return g, -g

    return _record(out, (a, b), bw)


def mul(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes incompatible: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = _result(a.data * b.data, a.requires_grad or b.requires_grad)

    def bw(g):
        return g * b.data, g * a.data

    return _record(out, (a, b), bw)


def mul_scalar(a, c):
    c = float(c)
    out = _result(a.data * c, a.requires_grad)

    def bw(g):
        return (g * c,)

    return _record(out, (a,), bw)


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = _result(out_data, a.requires_grad)

    def bw(g):
        return (g * out_data * (1.0 - out_data),)

    return _record(out, (a,), bw)


def tanh(a):
    out_data = np.tanh(a.data)
    out = _result(out_data, a.requires_grad)

    def bw(g):
        return (g * (1.0 - out_data * out_data),)

    return _record(out, (a,), bw)


def relu(a):
    out = _result(np.maximum(a.data, 0.0), a.requires_grad)
    x = a.data

    def bw(g):
        return (g * (x > 0.0),)

    return _record(out, (a,), bw)


def log(a):
    out = _result(np.log(a.data), a.requires_grad)
    x = a.data

    def bw(g):
        return (g / x,)

    return _record(out, (a,), bw)


def clamp(a, lo, hi):
    out = _result(np.clip(a.data, lo, hi), a.requires_grad)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        return (g * inside,)

    return _record(out, (a,), bw)


def slice_cols(a, start, stop):
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise DimensionError(f"bad column slice [{start}:{stop}] of shape {tuple(a.shape)}")
    out = _result(np.ascontiguousarray(a.data[:, start:stop]), a.requires_grad)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record(out, (a,), bw)


def scale_rows(a, v):
    """Multiply each row of a matrix by a constant per-row factor (mask carry)."""
    v = np.asarray(v, dtype=np.float64)
    if a.data.ndim != 2 or v.ndim != 1 or v.shape[0] != a.shape[0]:
        raise DimensionError(f"scale_rows needs matrix [m,n] and factor [m], got "
                             f"{tuple(a.shape)} and {v.shape}")
    col = v[:, None]
    out = _result(a.data * col, a.requires_grad)

    def bw(g):
        return (g * col,)

    return _record(out, (a,), bw)


def total_sum(a):
    """Sum of all entries as a single-element rank-1 tensor."""
    out = _result(np.array([a.data.sum()]), a.requires_grad)
    shape = a.shape

    def bw(g):
        return (np.full(shape, g[0]),)

    return _record(out, (a,), bw)


def as_vector(a):
    """Reshape a [m,1] column matrix to a rank-1 vector of length m."""
    if a.data.ndim != 2 or a.shape[1] != 1:
        raise DimensionError(f"as_vector needs shape [m,1], got {tuple(a.shape)}")
    out = _result(a.data.reshape(-1).copy(), a.requires_grad)
    m = a.shape[0]

    def bw(g):
        return (g.reshape(m, 1),)

    return _record(out, (a,), bw)


def as_column(a):
    """Reshape a rank-1 vector of length m to a [m,1] column matrix."""
    if a.data.ndim != 1:
        raise DimensionError(f"as_column needs a rank-1 tensor, got {tuple(a.shape)}")
    out = _result(a.data.reshape(-1, 1).copy(), a.requires_grad)

    def bw(g):
        return (g.reshape(-1),)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, leaves, h=1e-5, numeric_fn=None, precise_numeric_fn=None,
               recheck_threshold=1e-5):
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` builds a scalar loss from the current contents of ``leaves``.
    Numeric differences re-evaluate ``f`` (or ``numeric_fn``, an independent
    evaluator of the same function, which keeps the oracle off the tape
    code path entirely).  Returns the max over all leaf entries of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``; any NaN
    on either side reports as infinity.

    Entries whose error exceeds ``recheck_threshold`` are re-measured with
    ``precise_numeric_fn`` when given (e.g. an extended-precision
    evaluator); float64 cancellation noise in the difference quotient
    otherwise dominates entries whose true gradient is near zero.
    """
    evaluate = numeric_fn
    if evaluate is None:
        def evaluate():
            return f().item()

    for leaf in leaves:
        leaf.zero_grad()
    tape = Tape()
    with tape:
        loss = f()
    tape.backward(loss)

    def central_difference(flat, idx, saved, fn):
        flat[idx] = saved + h
        f_plus = fn()
        flat[idx] = saved - h
        f_minus = fn()
        flat[idx] = saved
        return (f_plus - f_minus) / (2.0 * h)

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        flat_grad = analytic.reshape(-1)
        for idx in range(flat.size):
            saved = flat[idx]
            numeric = central_difference(flat, idx, saved, evaluate)
            a = flat_grad[idx]
            if np.isnan(a) or np.isnan(numeric):
                return float("inf")
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > recheck_threshold and precise_numeric_fn is not None:
                numeric = central_difference(flat, idx, saved, precise_numeric_fn)
                if np.isnan(numeric):
                    return float("inf")
                rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > worst:
                worst = float(rel)
    return worst

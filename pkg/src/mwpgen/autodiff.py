"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors hold float64 numpy arrays. Operations executed while a Tape is
active are recorded as a Wengert list; Tape.backward replays the list in
reverse to accumulate gradients. The op set is exactly what the generation
model needs: matmul, elementwise arithmetic, concat/narrow, sigmoid, tanh,
exp, log, softmax, embedding lookup, 1-D convolution, max-over-time
pooling, gather and row tiling.

Design constraints honoured throughout:
  * float64 everywhere,
  * any non-finite value produced by a forward op raises NonFiniteError,
  * the only implicit broadcast is a vector bias added onto matrix rows
    (plus size-1 "scalar" tensors in the binary arithmetic ops),
  * softmax subtracts the row max before exponentiating,
  * max pooling breaks ties toward the lowest index.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "NonFiniteError",
    "UnknownOpError",
    "NondeterministicError",
    "forward_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "concat",
    "narrow",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax",
    "reduce_sum",
    "embedding",
    "gather_cols",
    "tile_rows",
    "conv1d",
    "max_over_time",
    "grad_check",
    "numeric_gradient",
]


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class UnknownOpError(ValueError):
    """forward_op was asked for an op name that is not registered."""


class NondeterministicError(RuntimeError):
    """grad_check detected two differing forward evaluations."""


class Tensor:
    """Dense float64 tensor, optionally tracked for gradients.

    `grad` is populated by Tape.backward and always matches `data` in
    shape. `name` marks parameter tensors so backward can return a
    per-parameter gradient map.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_flow", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._flow = self.requires_grad
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and same-shape tensors only
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out, inputs, grad_fn):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of executed ops; reverse replay yields gradients."""

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def backward(self, loss):
        """Populate .grad for every tensor reachable from `loss`.

        Returns a dict mapping parameter name -> gradient array for every
        named requires_grad tensor seen on the tape; tensors that do not
        influence the loss end up with an all-zero gradient.
        """
        if self.consumed:
            raise RuntimeError("tape already consumed by a previous backward()")
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
        if loss._tape is not self:
            raise ValueError("loss tensor was not produced on this tape")
        self.consumed = True

        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            if rec.out.grad is None:
                continue
            gs = rec.grad_fn(rec.out.grad)
            for inp, g in zip(rec.inputs, gs):
                if g is None or not inp._flow:
                    continue
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += g

        named = {}
        for rec in self.records:
            for inp in rec.inputs:
                if inp.requires_grad:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    if inp.name is not None:
                        named[inp.name] = inp.grad
        return named


class no_grad:
    """Context that suspends tape recording."""

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


def _finish(out_data, inputs, grad_fn):
    """Wrap an op result, check finiteness and record on the active tape."""
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError("forward op produced a non-finite value")
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(i._flow for i in inputs):
        out._flow = True
        out._tape = tape
        tape.records.append(_Record(out, inputs, grad_fn))
    return out


# ---------------------------------------------------------------------------
# binary arithmetic


def _binary_shapes(a, b, op):
    if a.data.shape == b.data.shape:
        return "same"
    if a.data.size == 1 or b.data.size == 1:
        return "scalar"
    if op == "add" and a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        return "bias"
    raise ValueError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}")


def _reduce_to(g, shape):
    """Sum a gradient down to `shape` (inverse of the allowed broadcasts)."""
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.array(g.sum(), dtype=np.float64).reshape(shape)
    # vector bias broadcast onto matrix rows
    return g.sum(axis=0).reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def grad_fn(g):
        return (_reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape))

    return _finish(a.data + b.data, (a, b), grad_fn)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def grad_fn(g):
        return (_reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape))

    return _finish(a.data - b.data, (a, b), grad_fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _binary_shapes(a, b, "mul")
    if kind == "bias":
        raise ValueError("mul: no bias broadcast; shapes must match")

    def grad_fn(g):
        return (_reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape))

    return _finish(a.data * b.data, (a, b), grad_fn)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _binary_shapes(a, b, "div")
    if kind == "bias":
        raise ValueError("div: no bias broadcast; shapes must match")

    def grad_fn(g):
        ga = _reduce_to(g / b.data, a.data.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.data.shape)
        return (ga, gb)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _finish(out, (a, b), grad_fn)


def neg(a):
    a = _as_tensor(a)

    def grad_fn(g):
        return (-g,)

    return _finish(-a.data, (a,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")

    def grad_fn(g):
        return (g @ b.data.T, a.data.T @ g)

    return _finish(a.data @ b.data, (a, b), grad_fn)


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")

    def grad_fn(g):
        return (g.T,)

    return _finish(a.data.T.copy(), (a,), grad_fn)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of zero tensors")
    nd = tensors[0].data.ndim
    if any(t.data.ndim != nd for t in tensors):
        raise ValueError("concat: rank mismatch")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _finish(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def narrow(a, axis, start, length):
    """Contiguous slice of `length` entries along `axis`, as a copy."""
    a = _as_tensor(a)
    if not (0 <= start and start + length <= a.data.shape[axis]):
        raise ValueError(f"narrow: [{start}, {start + length}) out of range on axis {axis}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _finish(a.data[idx].copy(), (a,), grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _finish(out, (a,), grad_fn)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _finish(out, (a,), grad_fn)


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _finish(out, (a,), grad_fn)


def log(a):
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _finish(out, (a,), grad_fn)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _finish(out, (a,), grad_fn)


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.full_like(a.data, float(g)),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.data.shape).copy(),)

    return _finish(np.asarray(out, dtype=np.float64), (a,), grad_fn)


# ---------------------------------------------------------------------------
# lookup / selection ops


def embedding(table, ids):
    """Rows `ids` of a (V, d) table; gradient scatter-adds into the table."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("embedding ids must be 1-D")
    if table.data.ndim != 2:
        raise ValueError("embedding table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError("embedding id out of range")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _finish(table.data[idx].copy(), (table,), grad_fn)


def gather_cols(a, cols):
    """Select columns of a (1, n) row tensor, preserving order."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[0] != 1:
        raise ValueError("gather_cols expects a (1, n) tensor")
    idx = np.asarray(cols, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise IndexError("gather_cols index out of range")

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga[0], idx, g[0])
        return (ga,)

    return _finish(a.data[:, idx].copy(), (a,), grad_fn)


def tile_rows(a, k):
    """Repeat a (1, n) row k times into a (k, n) matrix."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[0] != 1:
        raise ValueError("tile_rows expects a (1, n) tensor")

    def grad_fn(g):
        return (g.sum(axis=0, keepdims=True),)

    return _finish(np.repeat(a.data, k, axis=0), (a,), grad_fn)


def conv1d(x, w, b, width):
    """1-D convolution over time: x (L, d), w (width*d, dout), b (dout,).

    Window i is rows [i, i+width) of x flattened row-major, so the kernel
    sees [y_i; y_{i+1}; ...; y_{i+width-1}]. Output has L-width+1 rows.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    L, d = x.data.shape
    if L < width:
        raise ValueError(f"conv1d: input length {L} shorter than kernel width {width}")
    if w.data.shape[0] != width * d:
        raise ValueError(f"conv1d: kernel expects {w.data.shape[0]} inputs, window has {width * d}")
    n_win = L - width + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (width, d)).reshape(n_win, width * d)
    out = win @ w.data + b.data

    def grad_fn(g):
        gw = win.T @ g
        gb = g.sum(axis=0)
        gwin = (g @ w.data.T).reshape(n_win, width, d)
        gx = np.zeros_like(x.data)
        for j in range(width):
            gx[j:j + n_win] += gwin[:, j, :]
        return (gx, gw, gb)

    return _finish(out, (x, w, b), grad_fn)


def max_over_time(x):
    """Column-wise max over rows of x (L, d) -> (1, d); ties pick the lowest row."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("max_over_time expects a 2-D tensor")
    idx = np.argmax(x.data, axis=0)
    out = x.data[idx, np.arange(x.data.shape[1])].reshape(1, -1)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[idx, np.arange(x.data.shape[1])] = g[0]
        return (gx,)

    return _finish(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# registry dispatch

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "transpose": transpose,
    "concat": concat,
    "narrow": narrow,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "sum": reduce_sum,
    "embedding": embedding,
    "gather_cols": gather_cols,
    "tile_rows": tile_rows,
    "conv1d": conv1d,
    "max_over_time": max_over_time,
}


def forward_op(name, *inputs, **kwargs):
    """Dispatch an op by name. Raises UnknownOpError for unregistered names."""
    try:
        fn = _OPS[name]
    except KeyError:
        raise UnknownOpError(f"unknown op {name!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# gradient verification


def numeric_gradient(f, x, eps=1e-5):
    """Central finite differences of scalar-valued f at tensor x."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def grad_check(f, point, eps=1e-5):
    """Max relative error between analytic and finite-difference gradients.

    The relative error at a coordinate is |a - n| / max(1, |a|, |n|). f must
    be deterministic; two differing forward evaluations raise
    NondeterministicError.
    """
    x = Tensor(point.data.copy() if isinstance(point, Tensor) else point, requires_grad=True)

    with no_grad():
        y1 = f(x).item()
        y2 = f(x).item()
    if y1 != y2:
        raise NondeterministicError("two forward evaluations of f differ")

    with Tape() as tape:
        y = f(x)
    tape.backward(y)
    # f may ignore x entirely; the analytic gradient is then zero.
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = numeric_gradient(f, x, eps=eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0

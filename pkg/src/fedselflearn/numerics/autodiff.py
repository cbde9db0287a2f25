"""Array-level reverse-mode differentiation.

Operations on :class:`Tensor` are recorded on the active :class:`Tape` (if any)
and replayed in reverse by :meth:`Tape.gradient`.  Without an active tape the
same code runs as plain numpy, which is how inference paths share the model
definition with training.
"""

from __future__ import annotations

import threading

import numpy as np

_local = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op, where="forward"):
        super().__init__(f"non-finite value in {where} of operation {op!r}")
        self.op = op
        self.where = where


def _active_tape():
    return getattr(_local, "tape", None)


class Tape:
    """Records operations while active; use as a context manager."""

    def __init__(self, check_finite=True):
        self.nodes = []
        self.check_finite = check_finite
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def watch(self, value, name=None):
        """Create a leaf tensor whose gradient can be requested."""
        return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, op=name or "leaf")

    def gradient(self, loss, wrt):
        """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``."""
        if loss.value.size != 1:
            raise ValueError("gradient requires a scalar loss")
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if self.check_finite and not np.all(np.isfinite(pg)):
                    raise NonFiniteError(node.op, where="backward")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = []
        for t in wrt:
            g = grads.get(id(t))
            out.append(np.zeros_like(t.value) if g is None else np.broadcast_to(g, t.value.shape).copy())
        return out


class Tensor:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "op")
    __array_priority__ = 100

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, op="const"):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape})"

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
        return mul(self, 1.0 / _val(other)) if not isinstance(other, Tensor) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(x):
    """Detach ``x`` from the graph."""
    return Tensor(np.asarray(_val(x), dtype=np.float64))


stop_gradient = constant


def _val(x):
    return x.value if isinstance(x, Tensor) else x


def _record(value, parents, vjp, op):
    tape = _active_tape()
    check = tape.check_finite if tape is not None else True
    if check and not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    node = Tensor(value, parents, vjp, requires_grad=True, op=op)
    tape.nodes.append(node)
    return node


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)), "div")


def neg(a):
    a = as_tensor(a)
    return _record(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def vjp(g):
        if bv.ndim == 2:
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _record(av @ bv, (a, b), vjp, "matmul")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    av = a.value
    with np.errstate(divide="ignore"):
        out = np.log(av)
    return _record(out, (a,), lambda g: (g / av,), "log")


def tsum(a, axis=None):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(a.value.sum(axis=axis)), (a,), vjp, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def logsumexp(a, axis=-1):
    a = as_tensor(a)
    av = a.value
    m = av.max(axis=axis, keepdims=True)
    out_k = m + np.log(np.exp(av - m).sum(axis=axis, keepdims=True))
    out = np.squeeze(out_k, axis=axis)
    return _record(out, (a,), lambda g: (np.expand_dims(g, axis) * np.exp(av - out_k),), "logsumexp")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    av = a.value
    m = av.max(axis=axis, keepdims=True)
    shifted = av - m
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), vjp, "log_softmax")


def logcumsumexp(a):
    """Running log-sum-exp along the last axis."""
    a = as_tensor(a)
    av = a.value
    out = np.logaddexp.accumulate(av, axis=-1)

    def vjp(g):
        n = av.shape[-1]
        upper = np.triu(np.ones((n, n), dtype=bool))
        diff = np.where(upper, av[..., :, None] - out[..., None, :], -np.inf)
        return (np.einsum("...ku,...u->...k", np.exp(diff), g),)

    return _record(out, (a,), vjp, "logcumsumexp")


def cumsum(a, axis=-1):
    a = as_tensor(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis), axis),)

    return _record(np.cumsum(a.value, axis=axis), (a,), vjp, "cumsum")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(np.asarray(a.value[idx]), (a,), vjp, "getitem")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def expand_dims(a, axis):
    a = as_tensor(a)
    old = a.shape
    return _record(np.expand_dims(a.value, axis), (a,), lambda g: (g.reshape(old),), "expand_dims")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(np.stack([t.value for t in tensors], axis=axis), tuple(tensors), vjp, "stack")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), vjp, "concat")


def where(mask, a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb)

    return _record(np.where(mask, a.value, b.value), (a, b), vjp, "where")


def gated_rnn(xw, h0, wh):
    """Single-gate recurrent scan over axis 1.

    ``xw`` holds the input projections (bias included) for every step, shape
    (B, T, 2H); the first H columns drive the update gate, the rest the
    candidate.  Each step computes ``h = h + f * (c - h)`` with
    ``f = sigmoid(gate)`` and ``c = tanh(candidate)``.  Returns (B, T, H).
    """
    xw, h0, wh = as_tensor(xw), as_tensor(h0), as_tensor(wh)
    xv, whv = xw.value, wh.value
    n_steps = xv.shape[1]
    hdim = whv.shape[0]
    hs = np.empty(xv.shape[:2] + (hdim,))
    fs = np.empty_like(hs)
    cs = np.empty_like(hs)
    h = h0.value
    for t in range(n_steps):
        z = xv[:, t] + h @ whv
        f = _sigmoid(z[:, :hdim])
        c = np.tanh(z[:, hdim:])
        h = h + f * (c - h)
        hs[:, t], fs[:, t], cs[:, t] = h, f, c

    h0v = np.broadcast_to(h0.value, hs[:, 0].shape)
    h0_shape = h0.value.shape

    def vjp(g):
        gx = np.empty_like(xv)
        gwh = np.zeros_like(whv)
        dh = np.zeros(hs.shape[::2])
        for t in range(n_steps - 1, -1, -1):
            dh = dh + g[:, t]
            h_prev = hs[:, t - 1] if t > 0 else h0v
            f, c = fs[:, t], cs[:, t]
            dz = np.concatenate([dh * (c - h_prev) * f * (1.0 - f), dh * f * (1.0 - c * c)], axis=1)
            gx[:, t] = dz
            gwh += h_prev.T @ dz
            dh = dh * (1.0 - f) + dz @ whv.T
        return gx, _unbroadcast(dh, h0_shape), gwh

    return _record(hs, (xw, h0, wh), vjp, "gated_rnn")

"""Define-by-run reverse-mode autodiff over dense float64 arrays.

A module-level tape records one backward closure per primitive op, in
execution order. `backward(loss)` seeds the scalar loss with gradient 1,
replays the tape in reverse, accumulates into each tracked tensor's
`.grad`, and clears the tape. Tensors are immutable after construction
except for gradient accumulation; one tape per training step.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels


class Tape:
    """Ordered record of backward closures for one forward pass."""

    def __init__(self):
        self._records = []

    def record(self, fn):
        self._records.append(fn)

    def replay_reverse(self):
        for fn in reversed(self._records):
            fn()

    def clear(self):
        self._records.clear()

    def __len__(self):
        return len(self._records)


_tape = Tape()
_grad_enabled = True


def active_tape():
    return _tape


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience operator sugar; constants stay untracked
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors):
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _out_grad(out):
    g = out.grad
    out.grad = None
    return g


def _make_out(data, *inputs):
    out = Tensor(data)
    out.requires_grad = _tracked(*inputs)
    return out


# ------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make_out(a.data + b.data, a, b)
    if out.requires_grad:
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))
        _tape.record(bwd)
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make_out(a.data * b.data, a, b)
    if out.requires_grad:
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            _accum(a, _unbroadcast(g * b.data, a.shape))
            _accum(b, _unbroadcast(g * a.data, b.shape))
        _tape.record(bwd)
    return out


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    out = _make_out(a.data @ b.data, a, b)
    if out.requires_grad:
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
        _tape.record(bwd)
    return out


def sum_(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = _make_out(x.data.sum(axis=axis, keepdims=keepdims), x)
    if out.requires_grad:
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            _accum(x, np.broadcast_to(g, x.shape).copy())
        _tape.record(bwd)
    return out


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[i] for i in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------- view ops

def reshape(x, shape):
    x = _as_tensor(x)
    out = _make_out(x.data.reshape(shape), x)
    if out.requires_grad:
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            _accum(x, g.reshape(x.shape))
        _tape.record(bwd)
    return out


def permute(x, axes):
    x = _as_tensor(x)
    out = _make_out(np.ascontiguousarray(x.data.transpose(axes)), x)
    if out.requires_grad:
        inv = np.argsort(axes)
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            _accum(x, g.transpose(inv))
        _tape.record(bwd)
    return out


def concat_lastdim(parts):
    parts = [_as_tensor(p) for p in parts]
    out = _make_out(np.concatenate([p.data for p in parts], axis=-1), *parts)
    if out.requires_grad:
        sizes = [p.shape[-1] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _accum(p, g[..., lo:hi])
        _tape.record(bwd)
    return out


def slice_(x, index):
    x = _as_tensor(x)
    out = _make_out(np.ascontiguousarray(x.data[index]), x)
    if out.requires_grad:
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            full = np.zeros_like(x.data)
            full[index] = g
            _accum(x, full)
        _tape.record(bwd)
    return out


def pad2d(x, pad_h, pad_w):
    """Zero-pad the first two axes of [h, w, ...] on the bottom/right."""
    x = _as_tensor(x)
    widths = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (x.data.ndim - 2)
    out = _make_out(np.pad(x.data, widths), x)
    if out.requires_grad:
        h, w = x.shape[0], x.shape[1]
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            _accum(x, g[:h, :w])
        _tape.record(bwd)
    return out


def roll2d(x, dy, dx):
    """Toroidal translation of the first two axes: out[i,j] = x[i+dy, j+dx]."""
    x = _as_tensor(x)
    out = _make_out(np.roll(x.data, (-dy, -dx), axis=(0, 1)), x)
    if out.requires_grad:
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            _accum(x, np.roll(g, (dy, dx), axis=(0, 1)))
        _tape.record(bwd)
    return out


def gather_rows(table, index):
    """out[..., :] = table[index[...], :]; backward scatter-adds."""
    table = _as_tensor(table)
    idx = np.asarray(index)
    out = _make_out(table.data[idx], table)
    if out.requires_grad:
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            full = np.zeros_like(table.data)
            np.add.at(full, idx.ravel(),
                      g.reshape(-1, table.shape[-1]))
            _accum(table, full)
        _tape.record(bwd)
    return out


# ------------------------------------------------------------- nonlinear

def softmax_lastdim(x):
    x = _as_tensor(x)
    d = x.shape[-1]
    flat = x.data.reshape(-1, d)
    y = kernels.softmax_rows(flat)
    out = _make_out(y.reshape(x.shape), x)
    if out.requires_grad:
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            dx = kernels.softmax_rows_grad(y, np.ascontiguousarray(g).reshape(-1, d))
            _accum(x, dx.reshape(x.shape))
        _tape.record(bwd)
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layer_norm affine dims {gamma.shape}/{beta.shape} != ({d},)")
    flat = x.data.reshape(-1, d)
    y, xhat, rstd = kernels.layernorm_rows(flat, gamma.data, beta.data, eps)
    out = _make_out(y.reshape(x.shape), x, gamma, beta)
    if out.requires_grad:
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            dx, dgamma, dbeta = kernels.layernorm_rows_grad(
                np.ascontiguousarray(g).reshape(-1, d), xhat, rstd, gamma.data)
            _accum(x, dx.reshape(x.shape))
            _accum(gamma, dgamma)
            _accum(beta, dbeta)
        _tape.record(bwd)
    return out


def gelu(x):
    # tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
    x = _as_tensor(x)
    out = _make_out(kernels.gelu(x.data), x)
    if out.requires_grad:
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            _accum(x, kernels.gelu_grad(x.data, np.ascontiguousarray(g)))
        _tape.record(bwd)
    return out


def relu(x):
    x = _as_tensor(x)
    out = _make_out(np.maximum(x.data, 0.0), x)
    if out.requires_grad:
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            _accum(x, g * (x.data > 0.0))
        _tape.record(bwd)
    return out


def sigmoid(x):
    x = _as_tensor(x)
    y = kernels.sigmoid(x.data)
    out = _make_out(y, x)
    if out.requires_grad:
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            _accum(x, g * y * (1.0 - y))
        _tape.record(bwd)
    return out


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy over all elements, stable form
    max(x,0) - x*y + log(1 + exp(-|x|))."""
    logits = _as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValueError(f"target shape {y.shape} != logits {logits.shape}")
    bad = (y != 0.0) & (y != 1.0)
    if bad.any():
        raise ValueError("targets must be binary {0,1}")
    x = logits.data
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = _make_out(np.array(loss.mean()), logits)
    if out.requires_grad:
        n = x.size
        def bwd():
            g = _out_grad(out)
            if g is None:
                return
            _accum(logits, (g.reshape(-1)[0] / n) * (kernels.sigmoid(x) - y))
        _tape.record(bwd)
    return out


# ------------------------------------------------------------- backward

def backward(loss):
    """Run reverse-mode accumulation from a scalar loss; clears the tape."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("backward requires a scalar Tensor loss")
    loss.grad = np.ones_like(loss.data)
    try:
        _tape.replay_reverse()
    finally:
        _tape.clear()


def linear(x, w, b=None):
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out

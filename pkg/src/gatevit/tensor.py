"""Dense tensors with reverse-mode differentiation on an explicit tape.

A ``Tape`` records every differentiable operation in execution order;
``Tape.backward`` replays the adjoints in reverse. Execution order is a
topological order of the DAG, so a single reversed sweep is sufficient and,
being a plain list walk, bitwise reproducible across runs (single thread).

Gradients only exist while a tape is active: operations executed outside a
``with Tape()`` block produce constant tensors, which is the eval fast path.

Broadcasting: ``add``/``sub``/``mul`` follow numpy broadcasting, with
adjoints reduced back onto each operand via ``_unbroadcast``. Anything
fancier (axis insertion, repeats) must be spelled out with ``reshape`` /
``tile_leading`` so every adjoint stays auditable.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError

DEFAULT_DTYPE = np.float32

_ACTIVE_TAPE = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
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

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad}, name={self.name!r})")


class Node:
    __slots__ = ("op", "output", "backward")

    def __init__(self, op, output, backward):
        self.op = op
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss):
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.accumulate_grad(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            node.backward(g)

    def first_nonfinite(self):
        """Name and shape of the earliest recorded output holding a non-finite
        value, or None. Used for training-abort diagnostics."""
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.output.data)):
                return f"{node.op}#{i} shape={node.output.data.shape}"
        return None


def active_tape():
    return _ACTIVE_TAPE


def _result(op, data, inputs, backward):
    rg = _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rg)
    if rg:
        _ACTIVE_TAPE.nodes.append(Node(op, out, backward(out)))
    return out


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def constant(x, dtype=None):
    return Tensor(x, requires_grad=False, dtype=dtype)


def _pair(a, b):
    """Coerce one non-Tensor operand to the other's dtype; reject mixes."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    elif not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    if a.dtype != b.dtype:
        raise ShapeError(f"mixed dtypes {a.dtype} vs {b.dtype}")
    return a, b


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _pair(a, b)
    data = a.data + b.data

    def backward(out):
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.shape))
        return bw

    return _result("add", data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    data = a.data - b.data

    def backward(out):
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g, b.shape))
        return bw

    return _result("sub", data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)
    data = a.data * b.data

    def backward(out):
        ad, bd = a.data, b.data

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * bd, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * ad, b.shape))
        return bw

    return _result("mul", data, (a, b), backward)


def scale(a, s):
    """Multiply by a python scalar (no broadcasting bookkeeping)."""
    s = a.data.dtype.type(s)
    data = a.data * s

    def backward(out):
        def bw(g):
            a.accumulate_grad(g * s)
        return bw

    return _result("scale", data, (a,), backward)


def neg(a):
    return scale(a, -1.0)


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(out):
        ad, bd = a.data, b.data

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g @ bd.swapaxes(-1, -2), a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(ad.swapaxes(-1, -2) @ g, b.shape))
        return bw

    return _result("matmul", data, (a, b), backward)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape):
    data = a.data.reshape(shape)

    def backward(out):
        old = a.shape

        def bw(g):
            a.accumulate_grad(g.reshape(old))
        return bw

    return _result("reshape", data, (a,), backward)


def transpose(a, axes):
    data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(out):
        inv = np.argsort(axes)

        def bw(g):
            a.accumulate_grad(g.transpose(inv))
        return bw

    return _result("transpose", data, (a,), backward)


def tile_leading(a, reps):
    """Broadcast a copy along a new leading axis of extent ``reps``."""
    data = np.broadcast_to(a.data, (reps,) + a.shape).copy()

    def backward(out):
        def bw(g):
            a.accumulate_grad(g.sum(axis=0))
        return bw

    return _result("tile_leading", data, (a,), backward)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(out):
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def bw(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    t.accumulate_grad(g[tuple(idx)])
        return bw

    return _result("concat", data, tensors, backward)


def slice_axis(a, axis, start, stop):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = np.ascontiguousarray(a.data[idx])

    def backward(out):
        def bw(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            a.accumulate_grad(full)
        return bw

    return _result("slice_axis", data, (a,), backward)


def mask_select(a, mask):
    """Keep rows of axis 0 where ``mask`` is true; adjoint scatters back."""
    mask = np.asarray(mask, dtype=bool)
    data = np.ascontiguousarray(a.data[mask])

    def backward(out):
        def bw(g):
            full = np.zeros_like(a.data)
            full[mask] = g
            a.accumulate_grad(full)
        return bw

    return _result("mask_select", data, (a,), backward)


def zero_mask(a, mask):
    """Multiply by a constant 0/1 (or relaxed) mask; gradient masked alike."""
    m = np.asarray(mask, dtype=a.dtype)
    data = a.data * m

    def backward(out):
        def bw(g):
            a.accumulate_grad(_unbroadcast(g * m, a.shape))
        return bw

    return _result("zero_mask", data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None):
    data = a.data.sum(axis=axis)

    def backward(out):
        def bw(g):
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.shape))
            else:
                a.accumulate_grad(np.broadcast_to(
                    np.expand_dims(g, axis), a.shape))
        return bw

    return _result("sum", data, (a,), backward)


def tmean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities (hot kernels)


def _flat(x):
    return np.ascontiguousarray(x).reshape(-1)


def exp(a):
    data = np.exp(a.data)

    def backward(out):
        y = data

        def bw(g):
            a.accumulate_grad(g * y)
        return bw

    return _result("exp", data, (a,), backward)


def log(a):
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    data = np.log(a.data)

    def backward(out):
        x = a.data

        def bw(g):
            a.accumulate_grad(g / x)
        return bw

    return _result("log", data, (a,), backward)


def sigmoid(a):
    data = np.empty_like(a.data)
    kernels.sigmoid_fwd(_flat(a.data), data.reshape(-1))

    def backward(out):
        y = data

        def bw(g):
            gx = np.empty_like(y)
            kernels.sigmoid_bwd(_flat(y), _flat(g), gx.reshape(-1))
            a.accumulate_grad(gx)
        return bw

    return _result("sigmoid", data, (a,), backward)


def gelu(a):
    data = np.empty_like(a.data)
    kernels.gelu_fwd(_flat(a.data), data.reshape(-1))

    def backward(out):
        x = a.data

        def bw(g):
            gx = np.empty_like(x)
            kernels.gelu_bwd(_flat(x), _flat(g), gx.reshape(-1))
            a.accumulate_grad(gx)
        return bw

    return _result("gelu", data, (a,), backward)


def softmax(a, axis=-1):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    axis = axis % a.ndim
    moved = np.ascontiguousarray(np.moveaxis(a.data, axis, -1))
    flat = moved.reshape(-1, moved.shape[-1])
    y2 = np.empty_like(flat)
    kernels.softmax_fwd(flat, y2)
    data = np.moveaxis(y2.reshape(moved.shape), -1, axis)

    def backward(out):
        def bw(g):
            gm = np.ascontiguousarray(np.moveaxis(g, axis, -1))
            gf = gm.reshape(-1, gm.shape[-1])
            gx = np.empty_like(gf)
            kernels.softmax_bwd(y2, gf, gx)
            a.accumulate_grad(np.moveaxis(gx.reshape(gm.shape), -1, axis))
        return bw

    return _result("softmax", np.ascontiguousarray(data), (a,), backward)


def layernorm(a, gain, bias, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    gain, bias = as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm affine shapes {gain.shape}/{bias.shape} "
                         f"do not match last axis {d}")
    x2 = np.ascontiguousarray(a.data).reshape(-1, d)
    out2 = np.empty_like(x2)
    mean = np.empty(x2.shape[0], dtype=x2.dtype)
    rstd = np.empty(x2.shape[0], dtype=x2.dtype)
    kernels.layernorm_fwd(x2, gain.data, bias.data, eps, out2, mean, rstd)

    def backward(out):
        def bw(g):
            g2 = np.ascontiguousarray(g).reshape(-1, d)
            gx = np.empty_like(x2)
            ggain = np.empty_like(gain.data)
            gbias = np.empty_like(bias.data)
            kernels.layernorm_bwd(x2, gain.data, mean, rstd, g2,
                                  gx, ggain, gbias)
            if a.requires_grad:
                a.accumulate_grad(gx.reshape(a.shape))
            if gain.requires_grad:
                gain.accumulate_grad(ggain)
            if bias.requires_grad:
                bias.accumulate_grad(gbias)
        return bw

    return _result("layernorm", out2.reshape(a.shape), (a, gain, bias), backward)


def clamp(a, lo, hi):
    data = np.clip(a.data, lo, hi)

    def backward(out):
        inside = (a.data > lo) & (a.data < hi)

        def bw(g):
            a.accumulate_grad(g * inside)
        return bw

    return _result("clamp", data, (a,), backward)


def straight_through_hard(a, threshold=0.5):
    """Forward: hard 0/1 at ``threshold``. Backward: identity to ``a``."""
    data = (a.data >= threshold).astype(a.dtype)

    def backward(out):
        def bw(g):
            a.accumulate_grad(g)
        return bw

    return _result("straight_through", data, (a,), backward)

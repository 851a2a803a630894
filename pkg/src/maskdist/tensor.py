"""Dense float64 arrays with tape-based reverse-mode differentiation.

Design choices, deliberate and small:
  * everything is float64; desk-scale problems buy precision over speed
  * ops record onto an explicitly entered Tape (``with Tape() as tape:``);
    outside a tape, ops run in inference mode and record nothing
  * gradients accumulate additively into leaf ``.grad``; callers zero grads
    between steps
  * no general broadcasting: shapes must match exactly except for
    trailing-axis bias addition and the explicit repeat ops
"""

from __future__ import annotations

import threading

import numpy as np

from maskdist import _kernels as K


class CheckError(ValueError):
    """Raised by value checks (non-finite data, bad domains) in checked mode."""


_state = threading.local()


def _checked() -> bool:
    return getattr(_state, "checked", True)


class checks_disabled:
    """Context manager that turns off finite/domain checks (hot loops)."""

    def __enter__(self):
        self._prev = _checked()
        _state.checked = False
        return self

    def __exit__(self, *exc):
        _state.checked = self._prev
        return False


def _active_tape():
    return getattr(_state, "tape", None)


class Array:
    """A shaped block of float64 values, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0:
            arr = np.ascontiguousarray(arr)
        if _checked() and not np.all(np.isfinite(arr)):
            raise CheckError("non-finite value in array construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Array(shape={self.shape}, requires_grad={self.requires_grad})"

    # light operator sugar; the functional ops below are the real API
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))


class Tape:
    """Execution-ordered record of differentiable ops.

    Entries are appended as ops execute, so the list is topologically
    sorted by construction; backward walks it once in reverse.
    """

    def __init__(self):
        self.entries = []  # (out Array, inputs tuple, backward_fn)

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("tapes do not nest")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def record(self, out: Array, inputs, backward_fn):
        out.is_leaf = False
        self.entries.append((out, inputs, backward_fn))

    def backward(self, root: Array):
        """Accumulate d(root)/d(leaf) into every requires_grad leaf."""
        if root.shape != ():
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        if not root.is_leaf and all(out is not root for out, _, _ in self.entries):
            raise ValueError("backward root was not recorded on this tape")
        # grads maps node id -> [array, owned]; un-owned arrays may alias op
        # outputs or each other and are copied before in-place accumulation
        grads = {id(root): [np.ones((), dtype=np.float64), True]}
        for out, inputs, backward_fn in reversed(self.entries):
            slot = grads.pop(id(out), None)
            if slot is None:
                continue
            for inp, gin in zip(inputs, backward_fn(slot[0])):
                if gin is None:
                    continue
                if inp.is_leaf:
                    if inp.requires_grad:
                        inp.accumulate_grad(gin)
                    continue
                prev = grads.get(id(inp))
                if prev is None:
                    grads[id(inp)] = [gin, False]
                elif prev[1]:
                    prev[0] += gin
                else:
                    prev[0] = prev[0] + gin
                    prev[1] = True
        if root.is_leaf and root.requires_grad:
            root.accumulate_grad(np.ones((), dtype=np.float64))


def backward(root: Array, tape: Tape):
    tape.backward(root)


def constant(data) -> Array:
    return Array(data, requires_grad=False)


def parameter(data) -> Array:
    return Array(data, requires_grad=True)


def stop_gradient(x: Array) -> Array:
    """Value of x detached from the tape; no gradient flows through it."""
    out = Array.__new__(Array)
    out.data = x.data
    out.requires_grad = False
    out.grad = None
    out.is_leaf = True
    return out


def _make(data: np.ndarray, inputs, backward_fn) -> Array:
    """Wrap an op result, recording it when a tape is active and needed."""
    track = any(i.requires_grad for i in inputs)
    out = Array.__new__(Array)
    if _checked() and not np.all(np.isfinite(data)):
        raise CheckError("non-finite value produced by op")
    out.data = data
    out.requires_grad = track
    out.grad = None
    out.is_leaf = True
    tape = _active_tape()
    if track and tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Array:
    """a + b with identical shapes, or b a trailing-axis bias vector."""
    a, b = _as_array(a), _as_array(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def bwd(g):
            axes = tuple(range(g.ndim - 1))
            return g, g.sum(axis=axes)

        return _make(a.data + b.data, (a, b), bwd)
    raise ValueError(f"add shapes {a.shape} and {b.shape} do not conform")


def mul(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shapes {a.shape} and {b.shape} do not conform")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c: float) -> Array:
    a = _as_array(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Array:
    a = _as_array(a)
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,))


def exp(a) -> Array:
    a = _as_array(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,))


def log(a) -> Array:
    a = _as_array(a)
    if _checked() and np.any(a.data <= 0.0):
        raise CheckError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def pow_scalar(a, p: float) -> Array:
    a = _as_array(a)
    p = float(p)
    if _checked() and p != int(p) and np.any(a.data < 0.0):
        raise CheckError("fractional power of negative value")
    out_data = a.data**p
    return _make(out_data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def gelu(a) -> Array:
    a = _as_array(a)
    flat = a.data.reshape(-1)
    out_data = K.gelu_forward(flat).reshape(a.shape)

    def bwd(g):
        return (K.gelu_backward(flat, np.ascontiguousarray(g.reshape(-1))).reshape(a.shape),)

    return _make(out_data, (a,), bwd)


# ---------------------------------------------------------------- reductions


def sum_all(a) -> Array:
    a = _as_array(a)
    return _make(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),)
    )


def sum_axis(a, axis: int) -> Array:
    a = _as_array(a)
    axis = axis % a.data.ndim

    def bwd(g):
        return (np.repeat(np.expand_dims(g, axis), a.shape[axis], axis=axis),)

    return _make(a.data.sum(axis=axis), (a,), bwd)


def mean_all(a) -> Array:
    a = _as_array(a)
    return scale(sum_all(a), 1.0 / a.size)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Array:
    """(..., m, k) @ (k, n) with a shared 2-D right factor, or a stacked
    (..., m, k) @ (..., k, n) with identical leading dims."""
    a, b = _as_array(a), _as_array(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul requires >=2-D operands")
    if bd.ndim == 2:
        if ad.shape[-1] != bd.shape[0]:
            raise ValueError(f"matmul shapes {a.shape} and {b.shape} do not conform")

        def bwd(g):
            ga = np.matmul(g, bd.T)
            a2 = ad.reshape(-1, ad.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            return ga, a2.T @ g2

        return _make(np.matmul(ad, bd), (a, b), bwd)
    if ad.ndim == bd.ndim and ad.shape[:-2] == bd.shape[:-2] and ad.shape[-1] == bd.shape[-2]:
        def bwd(g):
            return (
                np.matmul(g, bd.swapaxes(-1, -2)),
                np.matmul(ad.swapaxes(-1, -2), g),
            )

        return _make(np.matmul(ad, bd), (a, b), bwd)
    raise ValueError(f"matmul shapes {a.shape} and {b.shape} do not conform")


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Array:
    a = _as_array(a)
    shape = tuple(shape)
    return _make(
        np.ascontiguousarray(a.data.reshape(shape)),
        (a,),
        lambda g: (g.reshape(a.shape),),
    )


def transpose(a, axes) -> Array:
    a = _as_array(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def repeat_leading(a, n: int) -> Array:
    """Tile a as (n, *a.shape); backward sums over the new axis."""
    a = _as_array(a)
    out_data = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _make(out_data, (a,), lambda g: (g.sum(axis=0),))


def repeat_axis(a, axis: int, n: int) -> Array:
    """Repeat a size-1 axis n times; backward sums back over it."""
    a = _as_array(a)
    if a.shape[axis] != 1:
        raise ValueError(f"repeat_axis needs size-1 axis, got {a.shape} axis {axis}")
    out_data = np.repeat(a.data, n, axis=axis)
    return _make(out_data, (a,), lambda g: (g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- fused rows


def softmax(a) -> Array:
    """Numerically stable softmax over the last axis."""
    a = _as_array(a)
    v = a.shape[-1]
    x2 = np.ascontiguousarray(a.data.reshape(-1, v))
    y2 = K.softmax_rows(x2)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, v))
        return (K.softmax_backward_rows(y2, g2).reshape(a.shape),)

    return _make(y2.reshape(a.shape), (a,), bwd)


def log_softmax(a) -> Array:
    a = _as_array(a)
    v = a.shape[-1]
    x2 = np.ascontiguousarray(a.data.reshape(-1, v))
    y2 = K.log_softmax_rows(x2)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, v))
        return (K.log_softmax_backward_rows(y2, g2).reshape(a.shape),)

    return _make(y2.reshape(a.shape), (a,), bwd)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Array:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_array(a), _as_array(gain), _as_array(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layer_norm gain/bias must match the last axis")
    x2 = np.ascontiguousarray(a.data.reshape(-1, d))
    y2, mean, rstd = K.layernorm_rows(x2, gain.data, bias.data, eps)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        gx, ggain, gbias = K.layernorm_backward_rows(x2, gain.data, mean, rstd, g2)
        return gx.reshape(a.shape), ggain, gbias

    return _make(y2.reshape(a.shape), (a, gain, bias), bwd)


# ---------------------------------------------------------------- gathers


def gather_rows(table, idx) -> Array:
    """out[i] = table[idx[i]] for any index shape; backward scatter-adds."""
    table = _as_array(table)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if _checked() and (idx.min(initial=0) < 0 or idx.max(initial=0) >= table.shape[0]):
        raise CheckError("gather_rows index out of range")
    flat = idx.reshape(-1)
    out_data = K.gather_rows(table.data, flat).reshape(idx.shape + (table.shape[1],))

    def bwd(g):
        gt = np.zeros_like(table.data)
        K.scatter_add_rows(gt, flat, np.ascontiguousarray(g.reshape(len(flat), -1)))
        return (gt,)

    return _make(out_data, (table,), bwd)


def gather_cols(a, idx) -> Array:
    """out[i] = a[i, idx[i]] for a 2-D a; backward scatter-adds."""
    a = _as_array(a)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    n, v = a.shape
    if idx.shape != (n,):
        raise ValueError("gather_cols index must be one entry per row")
    if _checked() and len(idx) and (idx.min() < 0 or idx.max() >= v):
        raise CheckError("gather_cols index out of range")
    rows = np.arange(n)
    out_data = a.data[rows, idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    return _make(out_data, (a,), bwd)

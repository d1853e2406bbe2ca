"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` records every operation applied to variables that require
gradients, in creation order (so parents always precede children).  Each
backward rule is itself written with :class:`Var` operations, which means
a backward pass can be recorded onto the graph (``create_graph=True``)
and differentiated once more.  Only one such level of nesting is allowed.

Example
-------
>>> with Graph() as g:
...     x = g.leaf(3.0)
...     y = x ** 3
...     (dx,) = g.grad(y, [x], create_graph=True)
...     (ddx,) = g.grad(dx, [x])
>>> float(dx.value), float(ddx)
(27.0, 18.0)
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DomainError, GraphError, NestingError, ShapeError

__all__ = [
    "Graph",
    "Var",
    "as_var",
    "matmul",
    "conv2d",
    "relu",
    "exp",
    "log",
    "absolute",
    "softmax",
    "log_softmax",
    "concat",
    "stack",
    "var_leading",
    "maximum",
]

MAX_NESTING = 1


def _as_array(value):
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Graph:
    """Append-only operation record.

    Use as a context manager; on exit the graph is closed and any variable
    recorded on it can no longer take part in new operations.
    """

    def __init__(self):
        self.nodes = []
        self.nesting_level = 0
        self.alive = True
        self._recording = True
        self._level = 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def close(self):
        self.alive = False
        self.nodes = []

    def leaf(self, value, requires_grad=True):
        self._check_alive()
        v = Var(value, graph=self if requires_grad else None, requires_grad=requires_grad)
        if requires_grad:
            v._level = 0
            self._append(v)
        return v

    def _append(self, v):
        v._index = len(self.nodes)
        self.nodes.append(v)

    def _check_alive(self):
        if not self.alive:
            raise GraphError("graph is closed; its variables are no longer valid")

    def _reverse(self, root, seed, create_graph):
        self._check_alive()
        if not isinstance(root, Var) or root.graph is not self or root._index is None:
            raise GraphError("root is not recorded on this graph")
        if create_graph and root._level >= MAX_NESTING:
            raise NestingError(
                f"derivative nesting deeper than {MAX_NESTING} is not supported"
            )
        if seed is None:
            if root.value.size != 1:
                raise ShapeError(
                    f"seed required for non-scalar root of shape {root.shape}"
                )
            seed = np.ones_like(root.value)
        seed = _as_array(seed)
        if seed.shape != root.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match root shape {root.shape}")

        prev_recording, prev_level = self._recording, self._level
        self._recording = create_graph
        if create_graph:
            self._level = 1
            self.nesting_level = 1
        try:
            grads = {root._index: Var(seed)}
            for node in reversed(self.nodes[: root._index + 1]):
                g = grads.get(node._index)
                if g is None or node._backward is None:
                    continue
                needs = tuple(p.requires_grad for p in node._parents)
                parent_grads = node._backward(g, needs)
                for parent, pg, need in zip(node._parents, parent_grads, needs):
                    if not need or pg is None:
                        continue
                    prev = grads.get(parent._index)
                    grads[parent._index] = pg if prev is None else prev + pg
        finally:
            self._recording, self._level = prev_recording, prev_level
        return grads

    def backward(self, root, seed=None):
        """Gradient of ``root`` for every requires-grad leaf, as arrays."""
        grads = self._reverse(root, seed, create_graph=False)
        out = {}
        for node in self.nodes[: root._index + 1]:
            if node._backward is None and node._index in grads:
                out[node] = grads[node._index].value
        return out

    def grad(self, root, wrt, seed=None, create_graph=False):
        """Gradients of ``root`` with respect to each variable in ``wrt``.

        With ``create_graph=True`` the results are recorded variables that
        can be differentiated again; otherwise plain arrays are returned.
        """
        grads = self._reverse(root, seed, create_graph)
        out = []
        for v in wrt:
            if not isinstance(v, Var) or v.graph is not self:
                raise GraphError("gradient requested for a variable not on this graph")
            g = grads.get(v._index)
            if g is None:
                g = Var(np.zeros_like(v.value))
            out.append(g if create_graph else g.value)
        return out


class Var:
    """A value participating in differentiation."""

    __array_priority__ = 1000

    def __init__(self, value, graph=None, requires_grad=False):
        self.value = _as_array(value)
        self.graph = graph
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._index = None
        self._level = 0

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Var(shape={self.shape}{flag})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return self.transpose()

    def detach(self):
        return Var(self.value)

    def numpy(self):
        return self.value

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def _make(value, parents, backward):
    graph = None
    for p in parents:
        if p.requires_grad:
            graph = p.graph
            break
    if graph is None or not graph._recording:
        return Var(value)
    graph._check_alive()
    for p in parents:
        if p.requires_grad and p.graph is not graph:
            raise GraphError("operands belong to different graphs")
    out = Var(value, graph=graph, requires_grad=True)
    out._parents = parents
    out._backward = backward
    out._level = max([graph._level] + [p._level for p in parents])
    graph._append(out)
    return out


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- shape plumbing ---------------------------------------------------------


def sum_to(a, shape):
    """Sum ``a`` down to ``shape`` (inverse of broadcasting)."""
    a = as_var(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    value = a.value
    lead = value.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and value.shape[i + lead] != 1
    )
    out = value.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    src_shape = a.shape

    def backward(g, needs):
        return (broadcast_to(g, src_shape),)

    return _make(out.reshape(shape), (a,), backward)


def broadcast_to(a, shape):
    a = as_var(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    src_shape = a.shape

    def backward(g, needs):
        return (sum_to(g, src_shape),)

    return _make(out, (a,), backward)


def reshape(a, shape):
    a = as_var(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    src_shape = a.shape

    def backward(g, needs):
        return (reshape(g, src_shape),)

    return _make(out, (a,), backward)


def transpose(a, axes=None):
    a = as_var(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g, needs):
        return (transpose(g, inverse),)

    return _make(np.transpose(a.value, axes), (a,), backward)


def getitem(a, idx):
    a = as_var(a)
    out = a.value[idx]
    src_shape = a.shape

    def backward(g, needs):
        return (scatter(g, src_shape, idx),)

    return _make(np.array(out, dtype=np.float64), (a,), backward)


def scatter(g, shape, idx):
    """Zeros of ``shape`` with ``g`` accumulated at ``idx``; adjoint of getitem."""
    g = as_var(g)
    out = np.zeros(shape)
    np.add.at(out, idx, g.value)

    def backward(gg, needs):
        return (getitem(gg, idx),)

    return _make(out, (g,), backward)


def concat(parts, axis=0):
    parts = [as_var(p) for p in parts]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        shapes = [p.shape for p in parts]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g, needs):
        grads = []
        for k, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(bounds[k]), int(bounds[k + 1]))
            grads.append(getitem(g, tuple(idx)))
        return tuple(grads)

    return _make(out, tuple(parts), backward)


def stack(parts, axis=0):
    parts = [as_var(p) for p in parts]
    expanded = []
    for p in parts:
        shape = list(p.shape)
        ax = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(ax, 1)
        expanded.append(reshape(p, tuple(shape)))
    return concat(expanded, axis=axis)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b):
    a, b = as_var(a), as_var(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (
            sum_to(g, sa) if needs[0] else None,
            sum_to(g, sb) if needs[1] else None,
        )

    return _make(a.value + b.value, (a, b), backward)


def sub(a, b):
    a, b = as_var(a), as_var(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (
            sum_to(g, sa) if needs[0] else None,
            sum_to(neg(g), sb) if needs[1] else None,
        )

    return _make(a.value - b.value, (a, b), backward)


def neg(a):
    a = as_var(a)

    def backward(g, needs):
        return (neg(g),)

    return _make(-a.value, (a,), backward)


def mul(a, b):
    a, b = as_var(a), as_var(b)
    _broadcast_shape(a, b, "mul")

    def backward(g, needs):
        return (
            sum_to(g * b, a.shape) if needs[0] else None,
            sum_to(g * a, b.shape) if needs[1] else None,
        )

    return _make(a.value * b.value, (a, b), backward)


def div(a, b):
    a, b = as_var(a), as_var(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.value == 0):
        raise DomainError("div: division by zero")

    def backward(g, needs):
        return (
            sum_to(g / b, a.shape) if needs[0] else None,
            sum_to(neg(g) * a / (b * b), b.shape) if needs[1] else None,
        )

    return _make(a.value / b.value, (a, b), backward)


def power(a, p):
    """Elementwise ``a ** p`` for a constant real exponent."""
    a = as_var(a)
    if isinstance(p, Var):
        raise TypeError("power: exponent must be a constant")
    p = float(p)
    if p != int(p) and np.any(a.value < 0):
        raise DomainError("power: negative base with non-integer exponent")
    if p < 0 and np.any(a.value == 0):
        raise DomainError("power: zero base with negative exponent")

    def backward(g, needs):
        if p == 1.0:
            return (g,)
        return (g * (p * power(a, p - 1.0)),)

    return _make(np.power(a.value, p), (a,), backward)


def exp(a):
    a = as_var(a)
    with np.errstate(over="raise"):
        try:
            value = np.exp(a.value)
        except FloatingPointError:
            raise DomainError("exp: overflow") from None

    def backward(g, needs):
        return (g * exp(a),)

    return _make(value, (a,), backward)


def log(a):
    a = as_var(a)
    if np.any(a.value <= 0):
        raise DomainError("log: argument must be positive")

    def backward(g, needs):
        return (g / a,)

    return _make(np.log(a.value), (a,), backward)


def relu(a):
    """max(a, 0); the derivative at exactly 0 is taken to be 0."""
    a = as_var(a)
    mask = (a.value > 0).astype(np.float64)

    def backward(g, needs):
        return (g * mask,)

    return _make(a.value * mask, (a,), backward)


def absolute(a):
    a = as_var(a)
    sign = np.sign(a.value)

    def backward(g, needs):
        return (g * sign,)

    return _make(np.abs(a.value), (a,), backward)


def maximum(a, floor):
    """Elementwise max with a constant floor (gradient passes where a > floor)."""
    a = as_var(a)
    mask = (a.value > floor).astype(np.float64)

    def backward(g, needs):
        return (g * mask,)

    return _make(np.maximum(a.value, floor), (a,), backward)


# -- reductions -------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _keep_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum_(a, axis=None, keepdims=False):
    a = as_var(a)
    axes = _norm_axis(axis, a.ndim)
    src_shape = a.shape
    kshape = _keep_shape(src_shape, axes)

    def backward(g, needs):
        return (broadcast_to(reshape(g, kshape), src_shape),)

    return _make(a.value.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_var(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


def max_(a, axis=None, keepdims=False):
    """Maximum over ``axis``; ties route the gradient to the first maximizer."""
    a = as_var(a)
    axes = _norm_axis(axis, a.ndim)
    value = a.value.max(axis=axes, keepdims=True)
    hit = a.value == value
    # keep only the first maximal element within each reduced group
    moved = np.moveaxis(hit, axes, tuple(range(a.ndim - len(axes), a.ndim)))
    flat = moved.reshape(moved.shape[: a.ndim - len(axes)] + (-1,))
    first = np.zeros_like(flat)
    np.put_along_axis(first, flat.argmax(axis=-1)[..., None], True, axis=-1)
    mask = np.moveaxis(
        first.reshape(moved.shape), tuple(range(a.ndim - len(axes), a.ndim)), axes
    ).astype(np.float64)
    kshape = value.shape
    src_shape = a.shape
    out = value if keepdims else value.reshape(
        tuple(s for i, s in enumerate(src_shape) if i not in axes)
    )

    def backward(g, needs):
        return (broadcast_to(reshape(g, kshape), src_shape) * mask,)

    return _make(out, (a,), backward)


def var_leading(a):
    """Population variance over the leading axis (divides by its length)."""
    a = as_var(a)
    centered = a - mean(a, axis=0, keepdims=True)
    return mean(centered * centered, axis=0)


def softmax(a, axis=-1):
    a = as_var(a)
    shift = a.value.max(axis=axis, keepdims=True)
    e = exp(a - shift)
    return e / sum_(e, axis=axis, keepdims=True)


def log_softmax(a, axis=-1):
    a = as_var(a)
    shift = a.value.max(axis=axis, keepdims=True)
    z = a - shift
    return z - log(sum_(exp(z), axis=axis, keepdims=True))


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _make(a.value @ b.value, (a, b), backward)


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _windows(xp, kh, kw, stride):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, w, stride=1, pad=0):
    """2-D cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw)."""
    x, w = as_var(x), as_var(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / pad {pad}")
    _, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    if _conv_out(h, kh, stride, pad) < 1 or _conv_out(wd, kw, stride, pad) < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, kh, kw, stride)
    out = np.tensordot(win, w.value, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    x_shape, w_shape = x.shape, w.shape

    def backward(g, needs):
        return (
            conv2d_grad_input(g, w, x_shape, stride, pad) if needs[0] else None,
            conv2d_grad_weight(x, g, w_shape, stride, pad) if needs[1] else None,
        )

    return _make(np.ascontiguousarray(out), (x, w), backward)


def conv2d_grad_input(gy, w, x_shape, stride=1, pad=0):
    """Adjoint of conv2d in its input argument."""
    gy, w = as_var(gy), as_var(w)
    n, c, h, wd = x_shape
    kh, kw = w.shape[2:]
    oh, ow = gy.shape[2:]
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(gy.value, w.value[:, :, i, j], axes=([1], [0]))
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad : pad + h, pad : pad + wd]

    def backward(g, needs):
        return (
            conv2d(g, w, stride, pad) if needs[0] else None,
            conv2d_grad_weight(g, gy, w.shape, stride, pad) if needs[1] else None,
        )

    return _make(np.ascontiguousarray(dx), (gy, w), backward)


def conv2d_grad_weight(x, gy, w_shape, stride=1, pad=0):
    """Adjoint of conv2d in its kernel argument."""
    x, gy = as_var(x), as_var(gy)
    kh, kw = w_shape[2:]
    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, kh, kw, stride)
    dw = np.tensordot(gy.value, win, axes=([0, 2, 3], [0, 2, 3]))

    def backward(g, needs):
        return (
            conv2d_grad_input(gy, g, x.shape, stride, pad) if needs[0] else None,
            conv2d(x, g, stride, pad) if needs[1] else None,
        )

    return _make(np.ascontiguousarray(dw), (x, gy), backward)

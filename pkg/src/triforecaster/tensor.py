"""Dense float64 tensors with reverse-mode automatic differentiation.

A dynamic tape: every operation returns a new ``Tensor`` holding references
to its parents and a closure that routes the output gradient back to them.
``Tensor.backward`` replays the tape in reverse execution order and
accumulates gradients into every reachable leaf with ``requires_grad``.

Values are row-major numpy arrays of 64-bit floats. Elementwise ops accept
operands of identical shape, scalars, and operands whose shape is a suffix
of the other's (broadcast over leading batch dims); anything else raises
``DimensionError`` so shape bugs surface where they happen.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ContractError, DimensionError

# When True, every op checks that its output is finite. Meant for tests and
# debugging; adds measurable overhead on training runs.
CHECK_FINITE = False

_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _non_scalar(self)

    def detach(self):
        """A constant view of the same values, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every reachable leaf with ``requires_grad``.

        The loss must be scalar. Repeated calls without ``zero_grad``
        accumulate into leaf gradients; interior node gradients are reset on
        every call.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        for node in topo:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # Operator sugar. Scalars are allowed on either side.
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _non_scalar(t):
    raise ContractError(f"item() requires a single-element tensor, got shape {t.shape}")


def constant(data):
    """A tensor that never receives gradient."""
    return Tensor(data, requires_grad=False)


def _coerce(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _fresh(data, parents):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise ContractError("forward op produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    else:
        out.requires_grad = False
        out._parents = ()
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_elementwise(a_shape, b_shape, op):
    if a_shape == b_shape or a_shape == () or b_shape == ():
        return
    small, large = sorted((a_shape, b_shape), key=len)
    if len(small) < len(large) and large[len(large) - len(small):] == small:
        return
    raise DimensionError(f"{op}: shapes {a_shape} and {b_shape} are not compatible")


def _unbroadcast(g, shape):
    """Reduce a gradient back to ``shape`` after suffix/scalar broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a.shape, b.shape, "add")
    out = _fresh(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(out.grad, b.shape))
        out._backward = _bw
    return out


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a.shape, b.shape, "sub")
    out = _fresh(a.data - b.data, (a, b))
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(-out.grad, b.shape))
        out._backward = _bw
    return out


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a.shape, b.shape, "mul")
    out = _fresh(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad * b.data, a.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.shape))
        out._backward = _bw
    return out


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a.shape, b.shape, "div")
    out = _fresh(a.data / b.data, (a, b))
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad / b.data, a.shape))
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))
        out._backward = _bw
    return out


def neg(a):
    a = _coerce(a)
    out = _fresh(-a.data, (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, -out.grad)
        out._backward = _bw
    return out


def scale(a, factor):
    """Multiply by a python scalar."""
    return mul(a, float(factor))


def absolute(a):
    """|x|, with the subgradient at zero fixed to 0."""
    a = _coerce(a)
    out = _fresh(np.abs(a.data), (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad * np.sign(a.data))
        out._backward = _bw
    return out


def exp(a):
    a = _coerce(a)
    out = _fresh(np.exp(a.data), (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad * out.data)
        out._backward = _bw
    return out


def relu(a):
    a = _coerce(a)
    out = _fresh(np.maximum(a.data, 0.0), (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad * (a.data > 0.0))
        out._backward = _bw
    return out


def square(a):
    a = _coerce(a)
    out = _fresh(a.data * a.data, (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad * 2.0 * a.data)
        out._backward = _bw
    return out


def sqrt(a):
    a = _coerce(a)
    out = _fresh(np.sqrt(a.data), (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad / (2.0 * out.data))
        out._backward = _bw
    return out


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires at least 2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}"
        )
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(
            f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast"
        ) from e
    out = _fresh(data, (a, b))
    if out.requires_grad:
        def _bw():
            ga = np.matmul(out.grad, b.data.swapaxes(-1, -2))
            gb = np.matmul(a.data.swapaxes(-1, -2), out.grad)
            _accum(a, _unbroadcast(ga, a.shape))
            _accum(b, _unbroadcast(gb, b.shape))
        out._backward = _bw
    return out


def transpose(a, axes):
    a = _coerce(a)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    out = _fresh(np.transpose(a.data, axes), (a,))
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))

        def _bw():
            _accum(a, np.transpose(out.grad, inverse))
        out._backward = _bw
    return out


def swap_last(a):
    """Transpose the two trailing axes."""
    a = _coerce(a)
    if a.ndim < 2:
        raise DimensionError(f"swap_last requires ndim >= 2, got shape {a.shape}")
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def reshape(a, shape):
    a = _coerce(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}") from e
    out = _fresh(data, (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad.reshape(a.shape))
        out._backward = _bw
    return out


def flatten(a):
    return reshape(a, (-1,))


def concat(parts, axis):
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ContractError("concat requires at least one tensor")
    nd = parts[0].ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"concat: axis {axis} invalid for ndim {nd}")
    axis = axis % nd
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != nd or other[:axis] + other[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise DimensionError(
                f"concat: shapes {parts[0].shape} and {p.shape} differ off axis {axis}"
            )
    out = _fresh(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    if out.requires_grad:
        offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]

        def _bw():
            pieces = np.split(out.grad, offsets, axis=axis)
            for p, g in zip(parts, pieces):
                _accum(p, g)
        out._backward = _bw
    return out


def stack(parts, axis=0):
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ContractError("stack requires at least one tensor")
    for p in parts[1:]:
        if p.shape != parts[0].shape:
            raise DimensionError(
                f"stack: shapes {parts[0].shape} and {p.shape} differ"
            )
    out = _fresh(np.stack([p.data for p in parts], axis=axis), tuple(parts))
    if out.requires_grad:
        def _bw():
            moved = np.moveaxis(out.grad, axis, 0)
            for i, p in enumerate(parts):
                _accum(p, moved[i])
        out._backward = _bw
    return out


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} invalid for ndim {ndim}")
        axes.append(ax % ndim)
    if len(set(axes)) != len(axes):
        raise DimensionError(f"duplicate axes in {axis}")
    return tuple(sorted(axes))


def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = _coerce(a)
    axes = _normalize_axes(axis, a.ndim)
    out = _fresh(a.data.sum(axis=axes, keepdims=keepdims), (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, _expand_reduced(out.grad, a.shape, axes, keepdims))
        out._backward = _bw
    return out


def mean(a, axis=None, keepdims=False):
    a = _coerce(a)
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = _fresh(a.data.mean(axis=axes, keepdims=keepdims), (a,))
    if out.requires_grad:
        def _bw():
            _accum(a, _expand_reduced(out.grad, a.shape, axes, keepdims) / count)
        out._backward = _bw
    return out


def softmax(a, axis):
    """Softmax along one axis, computed with max-subtraction for stability."""
    a = _coerce(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _fresh(y, (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            dot = (g * out.data).sum(axis=axis, keepdims=True)
            _accum(a, out.data * (g - dot))
        out._backward = _bw
    return out


def standardize(a, eps=1e-12):
    """Zero-mean unit-variance normalization over the last axis.

    The epsilon sits inside the square root of the denominator; the backward
    pass is exact for that definition.
    """
    a = _coerce(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv
    out = _fresh(y, (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            gm = g.mean(axis=-1, keepdims=True)
            proj = (g * out.data).mean(axis=-1, keepdims=True)
            _accum(a, (g - gm - out.data * proj) * inv)
        out._backward = _bw
    return out


def take_expert(o_cat, indices):
    """Select one leading-axis slice per trailing cell.

    ``o_cat`` has shape (E, *cells) and ``indices`` holds an expert index in
    [0, E) for every cell. The gradient flows only into the selected entries.
    """
    o_cat = _coerce(o_cat)
    idx = np.asarray(indices)
    if idx.shape != o_cat.shape[1:]:
        raise DimensionError(
            f"take_expert: index shape {idx.shape} does not match cells {o_cat.shape[1:]}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= o_cat.shape[0]):
        raise ContractError("take_expert: index out of range")
    idx = idx[None, ...]
    out = _fresh(np.take_along_axis(o_cat.data, idx, axis=0)[0], (o_cat,))
    if out.requires_grad:
        def _bw():
            buf = np.zeros_like(o_cat.data)
            np.put_along_axis(buf, idx, out.grad[None, ...], axis=0)
            _accum(o_cat, buf)
        out._backward = _bw
    return out

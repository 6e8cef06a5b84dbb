"""Minimal reverse-mode automatic differentiation over float64 numpy arrays."""

from __future__ import annotations

import numba
import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self):
        return transpose(self)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order[::-1]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("maximum", a, b)
    take_a = a.data >= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape),
                            _unbroadcast(g * ~take_a, b.shape)))


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), back)


def cross(a, b) -> Tensor:
    """Cross product along the last axis (length 3)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"cross: last axis must be 3, got {a.shape} and {b.shape}")
    return _make(np.cross(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.cross(b.data, g), a.shape),
                            _unbroadcast(np.cross(g, a.data), b.shape)))


def spmm(L: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a dense (N, F) tensor."""
    x = as_tensor(x)
    if x.ndim != 2 or L.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {L.shape} and {x.shape}")
    Lt = L.T.tocsr()
    return _make(np.asarray(L @ x.data), (x,), lambda g: (np.asarray(Lt @ g),))


# -- reductions and shape ------------------------------------------------------------


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), back)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def norm(x, axis=-1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as zero."""
    x = as_tensor(x)
    out = np.sqrt(np.sum(x.data * x.data, axis=axis))

    def back(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(g, axis) * np.where(n > 0, x.data / safe, 0.0),)

    return _make(out, (x,), back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def back(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(out, (x,), back)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: differing shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    return _make(out, tensors,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def gather(x, index: np.ndarray) -> Tensor:
    """Rows of ``x`` selected by an integer index array (first axis)."""
    x = as_tensor(x)
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError(f"gather: index out of range for {x.shape[0]} rows")

    def back(g):
        return (_scatter_add(g.reshape((index.size,) + x.shape[1:]), index.ravel(), x.shape[0]),)

    return _make(x.data[index], (x,), back)


def _scatter_add(g: np.ndarray, index: np.ndarray, count: int) -> np.ndarray:
    """Sum rows of ``g`` into ``count`` rows by ``index`` (a sparse product, fixed order)."""
    flat = g.reshape(len(index), -1)
    S = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))),
                      shape=(count, len(index)))
    return np.asarray(S @ flat).reshape((count,) + g.shape[1:])


@numba.njit(cache=True)
def _segment_max(values, starts, sizes):
    """Per-segment column max and the first row attaining it."""
    n, F = len(starts), values.shape[1]
    best = np.empty((n, F))
    arg = np.empty((n, F), dtype=np.int64)
    for s in range(n):
        r0 = starts[s]
        for f in range(F):
            b = values[r0, f]
            a = r0
            for r in range(r0 + 1, r0 + sizes[s]):
                if values[r, f] > b:
                    b = values[r, f]
                    a = r
            best[s, f] = b
            arg[s, f] = a
    return best, arg


def scatter_max(values, segments: np.ndarray, count: int) -> Tensor:
    """Segment-wise max of rows of ``values`` into ``count`` output rows.

    ``segments`` must be sorted ascending. Ties go to the first row in order.
    Empty segments produce zeros.
    """
    values = as_tensor(values)
    segments = np.asarray(segments)
    if len(segments) != values.shape[0]:
        raise ShapeError(f"scatter_max: {len(segments)} segment ids for {values.shape[0]} rows")
    if len(segments) and np.any(np.diff(segments) < 0):
        raise ShapeError("scatter_max: segment ids must be sorted")
    out = np.zeros((count,) + values.shape[1:])
    if len(segments) == 0:
        return _make(out, (values,), lambda g: (np.zeros_like(values.data),))
    present, starts, sizes = np.unique(segments, return_index=True, return_counts=True)
    flat = np.ascontiguousarray(values.data.reshape(len(segments), -1))
    best, arg = _segment_max(flat, starts, sizes)
    out[present] = best.reshape((len(present),) + values.shape[1:])
    arg = arg.reshape((len(present),) + values.shape[1:])

    def back(g):
        # each (row, column) pair wins at most one segment, so plain assignment suffices
        full = np.zeros_like(values.data)
        cols = np.indices(arg.shape)[1:]
        full[(arg,) + tuple(cols)] = g[present]
        return (full,)

    return _make(out, (values,), back)


# -- checking ------------------------------------------------------------------------


def numerical_grad(fn, inputs: list[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar ``fn()`` w.r.t. each input tensor."""
    grads = []
    with no_grad():
        for t in inputs:
            g = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            gf = g.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = float(fn().data)
                flat[i] = old - h
                fm = float(fn().data)
                flat[i] = old
                gf[i] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def gradcheck(fn, inputs: list[Tensor], h: float = 1e-5) -> float:
    """Largest relative error ``|a - n| / max(|a|, |n|)`` (norms per input)."""
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn()
    out.backward()
    num = numerical_grad(fn, inputs, h)
    worst = 0.0
    for t, n in zip(inputs, num):
        a = t.grad if t.grad is not None else np.zeros_like(t.data)
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst

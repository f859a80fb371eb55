"""numpy-backed tensors with reverse-mode automatic differentiation.

Each op returns a new Tensor carrying a closure that knows how to push
gradients to its parents; ``Tensor.backward`` runs the closures in
reverse topological order.  Training code uses float32 throughout;
gradient checks build their graphs in float64.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .instrument import record_flops

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_debug_nan = False


class NumericsError(ValueError):
    """Invalid shapes, dtypes, or non-finite values with NaN debug on."""


def autograd_enabled() -> bool:
    return _grad_enabled


def set_debug_nan(flag: bool):
    """When enabled, every op output is checked for NaN/Inf."""
    global _debug_nan
    _debug_nan = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericsError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            # views (broadcasts, reshapes) are materialized; fresh arrays are
            # taken as-is since no op mutates a gradient in place
            self.grad = g.copy() if g.base is not None else g
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Backpropagate from this tensor; defaults to d(self)/d(self)=1 for scalars."""
        if grad is None:
            if self.data.size != 1:
                raise NumericsError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise NumericsError("seed gradient shape mismatch")
        order = _topo_order(self)
        self.grad = grad
        for node in order:
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), mul(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NumericsError("tensor/tensor division is not a primitive; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}," \
               f" grad={self.requires_grad}{tag})"


def _fail(msg):
    raise NumericsError(msg)


def parameter(data, name=None, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(data: np.ndarray, parents, backward_fn, op_name: str) -> Tensor:
    """Wrap an op result, attaching the backward closure when recording."""
    if _debug_nan and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by {op_name}")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo_order(root: Tensor):
    """Nodes reachable from root, outputs first (iterative DFS)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _match_dtypes(a: Tensor, b) -> tuple[Tensor, Tensor]:
    b = _lift(b, a.dtype)
    if a.data.dtype != b.data.dtype:
        raise NumericsError(
            f"dtype mismatch: {a.data.dtype.name} vs {b.data.dtype.name}")
    return a, b


def add(a: Tensor, b) -> Tensor:
    a, b = _match_dtypes(a, b)
    data = a.data + b.data
    record_flops("ewise", data.size)

    def backward(g):
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(g, b.shape))

    return make_op(data, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    a, b = _match_dtypes(a, b)
    data = a.data * b.data
    record_flops("ewise", data.size)

    def backward(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return make_op(data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        raise NumericsError("matmul needs two tensors")
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError("matmul operands must be at least 2-D")
    if a.data.dtype != b.data.dtype:
        raise NumericsError("matmul dtype mismatch")
    data = np.matmul(a.data, b.data)
    k = a.shape[-1]
    record_flops("matmul", 2 * data.size * k)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a.accumulate_grad(_unbroadcast(ga, a.shape))
        b.accumulate_grad(_unbroadcast(gb, b.shape))

    return make_op(data, (a, b), backward, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = x.data.reshape(shape)

    def backward(g):
        x.accumulate_grad(g.reshape(x.shape))

    return make_op(data, (x,), backward, "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inv = np.argsort(axes)

    def backward(g):
        x.accumulate_grad(g.transpose(inv))

    return make_op(data, (x,), backward, "permute")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise NumericsError("concat of nothing")
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise NumericsError("concat dtype mismatch")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.accumulate_grad(piece)

    return make_op(data, tuple(tensors), backward, "concat")


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    data = x.data.mean(axis=axes, keepdims=keepdims)
    count = 1
    for a in axes:
        count *= x.shape[a]
    record_flops("reduce", x.size + data.size)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.data.dtype) / count)

    return make_op(data, (x,), backward, "mean")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)
    record_flops("reduce", x.size)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.data.dtype))

    return make_op(data, (x,), backward, "sum")


def _getitem(x: Tensor, idx) -> Tensor:
    # basic indexing only (ints/slices); array indices go through index_select
    data = x.data[idx]
    if isinstance(data, np.ndarray) and data.base is not None:
        data = data.copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] += g
        x.accumulate_grad(gx)

    return make_op(np.asarray(data), (x,), backward, "getitem")

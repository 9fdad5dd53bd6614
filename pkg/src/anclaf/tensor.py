"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation appends a node to a module-level tape in
execution order.  ``backward(loss)`` walks the tape in reverse, so each
node is visited exactly once and execution order doubles as the
topological order.  The tape is rebuilt from scratch every training step
(``reset_graph``); there is no graph reuse.

All data is float64.  Broadcasting is restricted to scalar-with-tensor;
callers reshape explicitly for anything else.  Scalar tensors (reduction
outputs) have shape (1,).
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from .errors import ShapeError

Scalar = Union[int, float]


class Tensor:
    """N-dimensional float64 array participating in the autodiff graph.

    ``data`` and ``grad`` expose the flat row-major buffers; ``shape`` is
    the logical shape.  All dimensions must be positive.
    """

    __slots__ = ("_array", "requires_grad", "_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.size == 0 or any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got shape {arr.shape}")
        self._array = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self._grad = None

    # -- structure ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self._array.shape

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the underlying buffer."""
        return self._array.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        """Shaped view of the underlying buffer (read-only by convention)."""
        return self._array

    @property
    def grad(self):
        """Flat gradient buffer, or None if no gradient has been accumulated."""
        return None if self._grad is None else self._grad.reshape(-1)

    @property
    def grad_array(self):
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self._array.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self._array.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Copy of this tensor cut off from the graph."""
        return Tensor(self._array.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ----------------------------------------------------

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def sqrt(self):
        return sqrt(self)

    def clip(self, lo: float, hi: float):
        return clip(self, lo, hi)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def var(self):
        return tvar(self)

    def backward(self):
        backward(self)


class Graph:
    """Execution-ordered record of differentiable operations (the tape)."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list = []

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self.nodes.append((out, backward_fn))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_GRAPH = Graph()
_GRAD_ENABLED = True


def active_graph() -> Graph:
    return _GRAPH


def reset_graph() -> None:
    """Drop all recorded nodes; call once per training step."""
    _GRAPH.clear()


class no_grad:
    """Context manager that suspends tape recording (forward-only passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``.

    Walks the tape in reverse; in reverse order every consumer of a tensor
    fires before its producer, so a node's output grad is complete when the
    node is reached.  Output grads are cleared after firing, which keeps
    leaf grads accumulating across calls while letting several losses share
    one tape (each ``backward`` propagates only its own seed).
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._grad is None:
        loss._grad = np.ones_like(loss._array)
    else:
        loss._grad = loss._grad + np.ones_like(loss._array)
    for out, fn in reversed(_GRAPH.nodes):
        g = out._grad
        if g is not None:
            fn(g)
            out._grad = None


# -- helpers ----------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t._grad is None:
        t._grad = np.zeros_like(t._array)
    t._grad += g


def _record(out: Tensor, fn: Callable[[np.ndarray], None]) -> None:
    if out.requires_grad and _GRAD_ENABLED:
        _GRAPH.record(out, fn)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a gradient onto a scalar operand's shape (sum over all)."""
    if g.shape == shape:
        return g
    return np.full(shape, g.sum()) if shape else np.asarray(g.sum())


def _check_binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{name}: operand shapes {a.shape} and {b.shape} are incompatible "
                     "(equal shapes or a scalar operand required)")


# -- binary elementwise -------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    _check_binary_shapes(a, b, "add")
    out = Tensor(a._array + b._array)
    out.requires_grad = a.requires_grad or b.requires_grad

    def fn(g):
        _accumulate(a, _reduce_to(g, a._array.shape))
        _accumulate(b, _reduce_to(g, b._array.shape))

    _record(out, fn)
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    _check_binary_shapes(a, b, "sub")
    out = Tensor(a._array - b._array)
    out.requires_grad = a.requires_grad or b.requires_grad

    def fn(g):
        _accumulate(a, _reduce_to(g, a._array.shape))
        _accumulate(b, _reduce_to(-g, b._array.shape))

    _record(out, fn)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    _check_binary_shapes(a, b, "mul")
    out = Tensor(a._array * b._array)
    out.requires_grad = a.requires_grad or b.requires_grad
    aa, ba = a._array, b._array

    def fn(g):
        _accumulate(a, _reduce_to(g * ba, aa.shape))
        _accumulate(b, _reduce_to(g * aa, ba.shape))

    _record(out, fn)
    return out


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    _check_binary_shapes(a, b, "div")
    out = Tensor(a._array / b._array)
    out.requires_grad = a.requires_grad or b.requires_grad
    aa, ba = a._array, b._array

    def fn(g):
        _accumulate(a, _reduce_to(g / ba, aa.shape))
        _accumulate(b, _reduce_to(-g * aa / (ba * ba), ba.shape))

    _record(out, fn)
    return out


def scale(a: Tensor, s: Scalar) -> Tensor:
    s = float(s)
    out = Tensor(a._array * s)
    out.requires_grad = a.requires_grad

    def fn(g):
        _accumulate(a, g * s)

    _record(out, fn)
    return out


# -- unary elementwise --------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a._array)
    out = Tensor(y)
    out.requires_grad = a.requires_grad

    def fn(g):
        _accumulate(a, g * (1.0 - y * y))

    _record(out, fn)
    return out


_SIG_LO = 5e-324
_SIG_HI = float(np.nextafter(1.0, 0.0))


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows; clamp keeps output strictly in (0, 1)
    # even where float64 rounding would reach the endpoints.
    x = a._array
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    y = np.clip(y, _SIG_LO, _SIG_HI)
    out = Tensor(y)
    out.requires_grad = a.requires_grad

    def fn(g):
        _accumulate(a, g * y * (1.0 - y))

    _record(out, fn)
    return out


def relu(a: Tensor) -> Tensor:
    x = a._array
    out = Tensor(np.maximum(x, 0.0))
    out.requires_grad = a.requires_grad

    def fn(g):
        _accumulate(a, g * (x > 0.0))

    _record(out, fn)
    return out


def log(a: Tensor) -> Tensor:
    x = a._array
    out = Tensor(np.log(x))
    out.requires_grad = a.requires_grad

    def fn(g):
        _accumulate(a, g / x)

    _record(out, fn)
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a._array)
    out = Tensor(y)
    out.requires_grad = a.requires_grad

    def fn(g):
        _accumulate(a, g * y)

    _record(out, fn)
    return out


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a._array)
    out = Tensor(y)
    out.requires_grad = a.requires_grad

    def fn(g):
        _accumulate(a, g / (2.0 * y))

    _record(out, fn)
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through strictly inside."""
    x = a._array
    out = Tensor(np.clip(x, lo, hi))
    out.requires_grad = a.requires_grad

    def fn(g):
        _accumulate(a, g * ((x > lo) & (x < hi)))

    _record(out, fn)
    return out


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": lambda a, b=None: tanh(a),
    "sigmoid": lambda a, b=None: sigmoid(a),
    "relu": lambda a, b=None: relu(a),
    "scale": scale,
}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by kind; binary kinds require equal shapes or a scalar b."""
    if op_kind not in _ELEMENTWISE:
        raise ShapeError(f"unknown elementwise kind '{op_kind}'")
    if op_kind in ("add", "sub", "mul", "scale"):
        return _ELEMENTWISE[op_kind](a, b)
    return _ELEMENTWISE[op_kind](a)


# -- structural ops -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = Tensor(a._array @ b._array)
    out.requires_grad = a.requires_grad or b.requires_grad
    aa, ba = a._array, b._array

    def fn(g):
        _accumulate(a, g @ ba.T)
        _accumulate(b, aa.T @ g)

    _record(out, fn)
    return out


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        new = a._array.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from e
    out = Tensor.__new__(Tensor)
    out._array = new
    out.requires_grad = a.requires_grad
    out._grad = None
    src_shape = a._array.shape

    def fn(g):
        _accumulate(a, g.reshape(src_shape))

    _record(out, fn)
    return out


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {a.shape}")
    out = Tensor(a._array.T)
    out.requires_grad = a.requires_grad

    def fn(g):
        _accumulate(a, g.T)

    _record(out, fn)
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: need at least one part")
    ndim = parts[0].ndim
    ax = axis if axis >= 0 else ndim + axis
    for p in parts[1:]:
        if p.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {parts[0].shape} vs {p.shape}")
        for d in range(ndim):
            if d != ax and p.shape[d] != parts[0].shape[d]:
                raise ShapeError(f"concat: non-axis dims differ: {parts[0].shape} vs {p.shape}")
    out = Tensor(np.concatenate([p._array for p in parts], axis=ax))
    out.requires_grad = any(p.requires_grad for p in parts)
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=ax)):
            _accumulate(p, piece)

    _record(out, fn)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    ax = axis if axis >= 0 else a.ndim + axis
    if not (0 <= start and start + length <= a.shape[ax] and length > 0):
        raise ShapeError(f"narrow: slice [{start}:{start + length}] out of range "
                         f"for axis {axis} of shape {a.shape}")
    idx = tuple(slice(None) if d != ax else slice(start, start + length)
                for d in range(a.ndim))
    out = Tensor(a._array[idx])
    out.requires_grad = a.requires_grad

    def fn(g):
        full = np.zeros_like(a._array)
        full[idx] = g
        _accumulate(a, full)

    _record(out, fn)
    return out


def take(a: Tensor, indices) -> Tensor:
    """Gather entries of a 1-D tensor at the given integer indices."""
    if a.ndim != 1:
        raise ShapeError(f"take: expects a 1-D tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a._array[idx])
    out.requires_grad = a.requires_grad

    def fn(g):
        full = np.zeros_like(a._array)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    _record(out, fn)
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    x = a._array
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    out.requires_grad = a.requires_grad

    def fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(a, y * (g - dot))

    _record(out, fn)
    return out


# -- reductions (always over all elements, population statistics) -------------


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a._array.sum()))
    out.requires_grad = a.requires_grad

    def fn(g):
        _accumulate(a, np.full_like(a._array, g.item()))

    _record(out, fn)
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(np.asarray(a._array.mean()))
    out.requires_grad = a.requires_grad

    def fn(g):
        _accumulate(a, np.full_like(a._array, g.item() / n))

    _record(out, fn)
    return out


def tvar(a: Tensor) -> Tensor:
    """Population variance (divide by n, not n-1)."""
    n = a.size
    x = a._array
    mu = x.mean()
    out = Tensor(np.asarray(((x - mu) ** 2).mean()))
    out.requires_grad = a.requires_grad

    def fn(g):
        _accumulate(a, g.item() * 2.0 * (x - mu) / n)

    _record(out, fn)
    return out


_REDUCE = {"sum": tsum, "mean": tmean, "var_population": tvar}


def reduce(stat: str, a: Tensor) -> Tensor:
    if stat not in _REDUCE:
        raise ShapeError(f"unknown reduction '{stat}'")
    return _REDUCE[stat](a)


def constant(values) -> Tensor:
    """Graph-free tensor (requires_grad False)."""
    return Tensor(values)


def parameter(values) -> Tensor:
    """Leaf tensor registered for gradient updates."""
    return Tensor(values, requires_grad=True)

"""Dense N-D tensors with tape-based reverse-mode differentiation.

Only the operations the detector needs are provided. Arrays are plain
numpy buffers; every op that touches a tensor requiring gradients records
a closure that pushes the output gradient back to its parents.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "no_grad",
    "is_grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "default_dtype",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "relu6",
    "log",
    "cos",
    "minimum",
    "elementwise",
    "concat",
    "tsum",
    "mean",
]


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible; names the offending axis."""

    def __init__(self, message: str, axis: str | int | None = None):
        super().__init__(message)
        self.axis = axis


_DEFAULT_DTYPE = np.float64
_grad_state = threading.local()


def set_default_dtype(dtype) -> None:
    """Select the floating precision new tensors are created with."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- gradient bookkeeping -------------------------------------------------
    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every leaf reachable from this tensor.

        Without an explicit seed the tensor must be a scalar. Gradients
        accumulate across calls until ``zero_grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() needs a scalar loss, got shape {self.shape}", axis=0
                )
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    pg = _unbroadcast(pg, parent.data.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Iterable[np.ndarray | None]],
) -> Tensor:
    """Wrap ``data`` as an op output, recording ``backward`` when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if len(sa) != len(sb):
        raise DimensionError(f"{opname}: rank mismatch {sa} vs {sb}", axis="rank")
    for axis, (x, y) in enumerate(zip(sa, sb)):
        if x != y and x != 1 and y != 1:
            raise DimensionError(
                f"{opname}: shapes {sa} and {sb} do not broadcast along axis {axis}",
                axis=axis,
            )


# -- binary elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product; a 1-channel map broadcasts across channels."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return ga, -ga * out

    return make_result(out, (a, b), backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return make_result(out, (a, b), lambda g: (g * pick_a, g * ~pick_a))


# -- unary elementwise -----------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return make_result(s, (a,), lambda g: (g * s * (1.0 - s),))


def relu6(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, 0.0, 6.0)
    return make_result(out, (a,), lambda g: (g * ((x > 0) & (x < 6)),))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,))


def cos(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result(np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def affine(a, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * a + shift`` with python-float constants."""
    a = as_tensor(a)
    return make_result(a.data * scale + shift, (a,), lambda g: (g * scale,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "minimum": minimum,
    "sigmoid": sigmoid,
    "relu6": relu6,
    "log": log,
    "cos": cos,
    "neg": neg,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name (add, mul, sigmoid, relu6, ...)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- structural ops ---------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        for ax, (x, y) in enumerate(zip(ref, t.shape)):
            if ax != axis % len(ref) and x != y:
                raise DimensionError(f"concat: mismatch on axis {ax}: {ref} vs {t.shape}", axis=ax)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            parts.append(g[tuple(sl)])
        return parts

    return make_result(out, tensors, backward)


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    shape = a.shape
    dtype = a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g) if _is_advanced(index) else full.__setitem__(index, g)
        return (full,)

    return make_result(np.array(out, copy=True), (a,), backward)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# -- reductions (always accumulated in float64) -----------------------------------

def tsum(a) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    total = np.asarray(np.sum(a.data, dtype=np.float64), dtype=dtype)
    return make_result(total, (a,), lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = max(a.size, 1)
    return affine(tsum(a), 1.0 / n)


def numerical_gradient(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-5,
                       indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central finite differences of ``fn`` w.r.t. the entries of ``x`` (in place).

    ``indices`` restricts the probe to a subset; other entries stay 0.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    it = indices if indices is not None else np.ndindex(*x.shape)
    for idx in it:
        orig = x[idx]
        x[idx] = orig + eps
        hi = fn()
        x[idx] = orig - eps
        lo = fn()
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))

"""
Dense tensors with reverse-mode automatic differentiation
Covers exactly the operation set the anticipation model needs
"""

import contextlib
import logging
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from errors import AVTError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype() -> np.dtype:
    """Floating dtype used for new tensors"""
    return np.dtype(_DEFAULT_DTYPE)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """
    Switch the default floating dtype for tensors created inside the block

    Args:
        dtype: np.float32 for training, np.float64 for gradient checking
    """
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them on the tape"""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so grad matches shape"""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(value, dtype=None) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class Tensor:
    """
    n-dimensional array that optionally participates in the gradient tape

    Leaves created with requires_grad=True collect gradients in `grad`
    (same shape as `data`) when backward() is called on a downstream scalar.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None,
                 _parents: Tuple["Tensor", ...] = (), _op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            array = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            array = data
        else:
            array = np.asarray(data, dtype=get_default_dtype())
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._op = _op
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # ------------------------------------------------------------------
    # Tape plumbing
    # ------------------------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], op: str,
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Wrap an op result, recording it on the tape when needed"""
        tracked = tuple(p for p in parents if p.requires_grad)
        if _GRAD_ENABLED and tracked:
            out = Tensor(data, requires_grad=True, _parents=tracked, _op=op)
            out._backward = backward
            return out
        return Tensor(data)

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if grad.shape != self.data.shape:
            grad = np.broadcast_to(grad, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """
        Propagate gradients to every tensor reachable from this one

        Shared subexpressions receive the sum of their path contributions.

        Args:
            grad: Seed gradient; defaults to 1 for scalar outputs
        """
        if not self.requires_grad:
            raise AVTError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward seed", self.shape, ())
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=self.data.dtype)

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, cut from the tape"""
        return Tensor(self.data)

    # ------------------------------------------------------------------
    # Elementwise arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def backward(g):
            a._accumulate(unbroadcast(g, a.shape))
            b._accumulate(unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), "add", backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._result(-a.data, (a,), "neg", backward)

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def backward(g):
            a._accumulate(unbroadcast(g, a.shape))
            b._accumulate(unbroadcast(-g, b.shape))

        return Tensor._result(a.data - b.data, (a, b), "sub", backward)

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), "mul", backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._result(a.data / b.data, (a, b), "div", backward)

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other, self.dtype) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise AVTError("only scalar exponents are supported")
        a = self

        def backward(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1))

        return Tensor._result(a.data ** exponent, (a,), "pow", backward)

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out_data)

        return Tensor._result(out_data, (a,), "exp", backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        return Tensor._result(np.log(a.data), (a,), "log", backward)

    def sqrt(self) -> "Tensor":
        a = self
        out_data = np.sqrt(a.data)

        def backward(g):
            a._accumulate(g * 0.5 / out_data)

        return Tensor._result(out_data, (a,), "sqrt", backward)

    # ------------------------------------------------------------------
    # Linear algebra and reductions
    # ------------------------------------------------------------------

    def matmul(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", a.shape, b.shape)

        def backward(g):
            if a.requires_grad:
                a._accumulate(unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
            if b.requires_grad:
                b._accumulate(unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

        return Tensor._result(np.matmul(a.data, b.data), (a, b), "matmul", backward)

    __matmul__ = matmul

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        axes = _normalize_axes(axis, a.ndim)

        def backward(g):
            if not keepdims and axes:
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[ax] for ax in axes])) if axes else 1
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ------------------------------------------------------------------
    # Shape manipulation
    # ------------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def backward(g):
            a._accumulate(g.reshape(a.shape))

        return Tensor._result(a.data.reshape(shape), (a,), "reshape", backward)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        a = self

        def backward(g):
            a._accumulate(np.transpose(g, inverse))

        return Tensor._result(np.transpose(a.data, axes), (a,), "transpose", backward)

    def swapaxes(self, first: int, second: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[first], axes[second] = axes[second], axes[first]
        return self.transpose(tuple(axes))

    def broadcast_to(self, shape: Tuple[int, ...]) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(unbroadcast(g, a.shape))

        return Tensor._result(np.broadcast_to(a.data, shape), (a,), "broadcast", backward)

    def __getitem__(self, index) -> "Tensor":
        if isinstance(index, Tensor):
            index = index.data
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)

        return Tensor._result(a.data[index], (a,), "getitem", backward)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))

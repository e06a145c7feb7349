"""Dense tensors with a define-by-run reverse-mode tape.

Storage is float32 by default. Reductions accumulate in float64. Every
differentiable operation is a ``Function`` subclass whose ``apply`` records an
entry on the innermost ``with Tape()`` block when gradients are enabled and any
input requires them. Outside a tape nothing is recorded and results are
constants. ``backward(loss)`` walks that tape once, newest entry first.
"""
import logging
import threading
from contextlib import contextmanager
from typing import Any, Sequence

import numpy as np
from scipy.special import expit

from .errors import ShapeError

logger = logging.getLogger(__name__)

_local = threading.local()


def _state():
    if not getattr(_local, "initialized", False):
        _local.initialized = True
        _local.dtype = np.dtype(np.float32)
        _local.grad_enabled = True
        _local.tapes = []
    return _local


def get_default_dtype() -> np.dtype:
    return _state().dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    state = _state()
    previous = state.dtype
    state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        state.dtype = previous


def is_grad_enabled() -> bool:
    return _state().grad_enabled


@contextmanager
def no_grad():
    state = _state()
    previous = state.grad_enabled
    state.grad_enabled = False
    try:
        yield
    finally:
        state.grad_enabled = previous


def current_tape() -> "Tape | None":
    """Innermost active tape, or None outside any ``with Tape()`` block."""
    tapes = _state().tapes
    return tapes[-1] if tapes else None


class TapeEntry:
    __slots__ = ("fn", "inputs", "output", "tape", "generation", "index")

    def __init__(self, fn, inputs, output, tape, generation, index):
        self.fn = fn
        self.inputs = inputs
        self.output = output
        self.tape = tape
        self.generation = generation
        self.index = index


class Tape:
    """Ordered record of the operations of one forward pass.

    Entries are appended in execution order, so inputs always precede the ops
    that consume them. After ``backward`` the tape is consumed; recording a new
    op starts a fresh generation, and a second ``backward`` on the old graph is
    an error.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.generation = 0
        self.consumed = False

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _state().tapes.append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _state().tapes.pop()

    def reset(self) -> None:
        self.entries = []
        self.consumed = False
        self.generation += 1

    def record(self, fn: "Function", inputs: tuple["Tensor", ...], output: "Tensor") -> None:
        if self.consumed:
            self.reset()
        entry = TapeEntry(fn, inputs, output, self, self.generation, len(self.entries))
        self.entries.append(entry)
        output._entry = entry

    def _owns(self, tensor: "Tensor") -> bool:
        entry = tensor._entry
        return entry is not None and entry.tape is self and entry.generation == self.generation

    def run_backward(self, loss: "Tensor") -> None:
        if self.consumed or not self._owns(loss):
            raise RuntimeError("backward already ran for this graph; reset the tape before calling it again")

        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
        for entry in reversed(self.entries[: loss._entry.index + 1]):
            grad = grads.pop(id(entry.output), None)
            if grad is None:
                continue
            input_grads = entry.fn.backward(grad)
            for inp, inp_grad in zip(entry.inputs, input_grads):
                if inp_grad is None or not inp.requires_grad:
                    continue
                inp_grad = unbroadcast(np.asarray(inp_grad), inp.shape)
                if self._owns(inp):
                    key = id(inp)
                    grads[key] = grads[key] + inp_grad if key in grads else inp_grad
                elif inp._entry is None:
                    if inp.grad is None:
                        inp.grad = np.array(inp_grad, dtype=inp.data.dtype)
                    else:
                        inp.grad += inp_grad

        self.consumed = True
        self.entries = []


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach its shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(loss: "Tensor") -> None:
    """Populate ``.grad`` on every leaf that requires it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._entry is None:
        raise RuntimeError(
            "loss is not on a tape: it was computed outside `with Tape()` or without any input requiring grad"
        )
    loss._entry.tape.run_backward(loss)


def as_tensor(value: Any) -> "Tensor":
    return value if isinstance(value, Tensor) else Tensor(value)


class Function:
    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> "Tensor":
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls()
        out = Tensor(fn.forward(*(t.data for t in tensors), **kwargs))
        tape = current_tape()
        if tape is not None and is_grad_enabled() and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            tape.record(fn, tensors, out)
        return out


class Tensor:
    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._entry: TapeEntry | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Mul.apply(self, -1.0)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def square(self):
        return Square.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def log(self):
        return Log.apply(self)

    def exp(self):
        return Exp.apply(self)

    def sin(self):
        return Sin.apply(self)

    def abs(self):
        return Abs.apply(self)

    def silu(self):
        return Silu.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def clamp(self, lo: float, hi: float):
        return Clamp.apply(self, lo=lo, hi=hi)


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class Add(Function):
    def forward(self, a, b):
        _broadcast_check("add", a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        _broadcast_check("sub", a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        _broadcast_check("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        _broadcast_check("div", a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Pow(Function):
    def forward(self, a, exponent: float):
        self.a, self.exponent = a, exponent
        return np.power(a, exponent)

    def backward(self, grad):
        return (grad * self.exponent * np.power(self.a, self.exponent - 1),)


class Square(Function):
    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, grad):
        return (2 * grad * self.a,)


class Sqrt(Function):
    def forward(self, a):
        if np.any(a < 0):
            raise ValueError(f"sqrt of negative value (min {a.min()})")
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise ValueError(f"log of non-positive value (min {a.min()})")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Sin(Function):
    def forward(self, a):
        self.a = a
        return np.sin(a)

    def backward(self, grad):
        return (grad * np.cos(self.a),)


class Abs(Function):
    def forward(self, a):
        self.a = a
        return np.abs(a)

    def backward(self, grad):
        return (grad * np.sign(self.a),)


class Sigmoid(Function):
    def forward(self, a):
        self.out = expit(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


class Silu(Function):
    def forward(self, a):
        self.a = a
        self.sig = expit(a)
        return a * self.sig

    def backward(self, grad):
        return (grad * self.sig * (1 + self.a * (1 - self.sig)),)


class Clamp(Function):
    def forward(self, a, lo: float, hi: float):
        self.inside = (a >= lo) & (a <= hi)
        return np.clip(a, lo, hi)

    def backward(self, grad):
        return (grad * self.inside,)


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    def forward(self, a, axis=None, keepdims: bool = False):
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.sum(a, axis=self.axes, keepdims=keepdims, dtype=np.float64)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims: bool = False):
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[ax] for ax in self.axes]))
        return np.mean(a, axis=self.axes, keepdims=keepdims, dtype=np.float64)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad / self.count, self.shape),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.index = a.shape, index
        return a[index]

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, self.index, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis: int = 0):
        ndim = arrays[0].ndim
        self.axis = axis % ndim
        others = [tuple(s for i, s in enumerate(a.shape) if i != self.axis) for a in arrays]
        if any(o != others[0] for o in others):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {[a.shape for a in arrays]}")
        self.splits = np.cumsum([a.shape[self.axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


_BINARY = {"add": Add, "sub": Sub, "mul": Mul, "div": Div}
_UNARY = {
    "silu": Silu,
    "square": Square,
    "sqrt": Sqrt,
    "log": Log,
    "exp": Exp,
    "sin": Sin,
    "abs": Abs,
    "sigmoid": Sigmoid,
}


def elementwise(op: str, a, b=None) -> Tensor:
    if op == "scale":
        if not np.isscalar(b):
            raise ValueError("scale needs a scalar factor")
        return Mul.apply(a, float(b))
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op].apply(a, b)
    if op in _UNARY:
        return _UNARY[op].apply(a)
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)


def stack_sum(tensors: Sequence[Tensor]) -> Tensor:
    total = tensors[0]
    for t in tensors[1:]:
        total = total + t
    return total


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)

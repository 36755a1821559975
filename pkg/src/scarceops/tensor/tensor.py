"""Dense tensors and the tape that records differentiable operations."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    """An n-dimensional float array with an optional gradient slot.

    Model math runs in float32. Passing ``dtype=np.float64`` gives the
    64-bit path used by gradient checks.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; the functional module holds the real implementations.
    def __add__(self, other):
        from . import functional as F

        return F.add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F

        return F.add(self, F.scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        from . import functional as F

        if np.isscalar(other):
            return F.scale(self, float(other))
        return F.mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F

        return F.scale(self, -1.0)

    def sum(self):
        from . import functional as F

        return F.sum(self)

    def mean(self):
        from . import functional as F

        return F.mean(self)

    def reshape(self, *shape):
        from . import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


@dataclass
class TapeEntry:
    """One recorded operation: its inputs, output and backward rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Operations executed inside ``with tape:`` append themselves here when at
    least one input requires a gradient.
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self, "tape stack corrupted"

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)

    def clear(self) -> None:
        self.entries.clear()


_local = threading.local()


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape) -> None:
    """Replay ``tape`` in reverse and accumulate gradients into ``.grad``.

    ``loss`` must hold exactly one element. Gradients add onto any existing
    ``.grad`` buffer, so callers zero them between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}

    for entry in reversed(tape.entries):
        g_out = grads.get(id(entry.output))
        if g_out is None:
            continue
        in_grads = entry.backward(g_out)
        for tensor, g in zip(entry.inputs, in_grads):
            if g is None or not tensor.requires_grad:
                continue
            if g.shape != tensor.shape:
                raise ShapeError(f"{entry.op}: gradient shape {g.shape} != input shape {tensor.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient flowing out of {entry.op}")
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                owners[key] = tensor

    for key, tensor in owners.items():
        if not tensor.requires_grad:
            continue
        g = grads[key].astype(tensor.dtype, copy=False)
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g

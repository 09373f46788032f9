"""Dense tensors with tape-based reverse-mode automatic differentiation.

Operations performed while a :class:`Tape` is active are recorded in
execution order. :func:`backward` walks the tape in reverse and
accumulates vector-Jacobian products into every recorded node.

    with Tape() as tape:
        loss = ops.mean(ops.mul(x, x))
    backward(tape, loss)
    x.grad  # d loss / d x
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count(1)
_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense float array with an optional gradient slot."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int = next(_ids)
        self.name = name
        # set when produced by a recorded op
        self.is_leaf = True

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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; the implementations live in voxinit.ops
    def __add__(self, other):
        from voxinit import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from voxinit import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from voxinit import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from voxinit import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from voxinit import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from voxinit import ops
        return ops.div(other, self)

    def __neg__(self):
        from voxinit import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from voxinit import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from voxinit import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from voxinit import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from voxinit import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from voxinit import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from voxinit import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from voxinit import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


@dataclass
class TapeEntry:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    A tape belongs to the thread that opened it; nesting is allowed and the
    innermost active tape receives new records.
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def ops(self) -> list[str]:
        return [e.op for e in self.entries]

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
        return backward(self, loss, wrt)


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording on this thread (inference)."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()
        return self

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record it if any input needs grad."""
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(TapeEntry(op, tuple(t.node_id for t in inputs), out.node_id,
                              tuple(inputs), out, vjp))
    return out


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Propagate d loss / d node through ``tape``.

    Leaf tensors with ``requires_grad`` found on the tape get their ``.grad``
    accumulated; tensors listed in ``wrt`` that the loss does not reach get a
    zero gradient. Returns the gradient of every node keyed by ``node_id``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output_id, None)
        for t in entry.inputs:
            if t.is_leaf and t.requires_grad:
                leaves[t.node_id] = t
        if g is None:
            continue
        in_grads = entry.vjp(g)
        for t, gi in zip(entry.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"{entry.op}: gradient shape {gi.shape} != input shape {t.shape}")
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi
        grads.setdefault(entry.output_id, g)
    for nid, t in leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g
    for t in wrt or ():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return grads

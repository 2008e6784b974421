"""Tensor storage, the computation tape and reverse-mode backward.

Elements live in a numpy array whose dtype is fixed by the process-wide
precision setting (``float32`` for training, ``float64`` for gradient checks).
Operations are recorded on the innermost active :class:`ComputationTape`;
outside of any tape nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


class DimensionError(ValueError):
    """Input shapes are invalid for an operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


_PRECISIONS = {"float32": np.float32, "float64": np.float64, "extended": np.longdouble}
_dtype: type = np.float32


def get_dtype() -> type:
    return _dtype


def set_precision(name: str) -> None:
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the tensor-wide precision."""
    global _dtype
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = previous


class Tensor:
    """An n-dimensional array with an optional gradient buffer.

    The element buffer is treated as immutable once constructed; only ``grad``
    changes over a tensor's life.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_dtype)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed with non-finite elements")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == _dtype else arr.astype(_dtype)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    # Operator sugar; every path goes through apply_primitive.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return apply_primitive("add", [self, other])
        return apply_primitive("scalar-add", [self], scalar=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return apply_primitive("sub", [self, other])
        return apply_primitive("scalar-add", [self], scalar=-float(other))

    def __rsub__(self, other):
        neg = apply_primitive("scalar-mul", [self], scalar=-1.0)
        return apply_primitive("scalar-add", [neg], scalar=float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return apply_primitive("mul", [self, other])
        return apply_primitive("scalar-mul", [self], scalar=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return apply_primitive("div", [self, other])
        return apply_primitive("scalar-mul", [self], scalar=1.0 / float(other))

    def __neg__(self):
        return apply_primitive("scalar-mul", [self], scalar=-1.0)

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def __pow__(self, exponent):
        return apply_primitive("power", [self], exponent=float(exponent))

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply_primitive("transpose", [self], axes=tuple(axes) if axes else None)


@dataclass
class Primitive:
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., Sequence[np.ndarray | None]] | None


_REGISTRY: dict[str, Primitive] = {}


def register(kind: str, backward: Callable | None = None):
    """Decorator registering a forward function (and its backward) under ``kind``."""

    def deco(fwd):
        _REGISTRY[kind] = Primitive(fwd, backward)
        return fwd

    return deco


def registered_kinds() -> list[str]:
    return sorted(_REGISTRY)


@dataclass
class TapeNode:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: Any
    attrs: dict


@dataclass
class ComputationTape:
    """Append-only record of differentiable operations.

    Use as a context manager; every primitive applied inside the ``with`` block
    whose inputs require gradients appends one node. A tape supports a single
    :func:`backward` pass, after which it is consumed.
    """

    nodes: list[TapeNode] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "ComputationTape":
        if self.consumed:
            raise ContractError("tape already consumed by backward()")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, node: TapeNode) -> None:
        if self.consumed:
            raise ContractError("cannot record on a consumed tape")
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        return backward(loss, self)


_TAPES: list[ComputationTape] = []


def current_tape() -> ComputationTape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording, e.g. for evaluation forwards inside a training step."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run primitive ``kind`` on ``inputs`` and record it on the active tape."""
    prim = _REGISTRY.get(kind)
    if prim is None:
        raise ContractError(f"unknown primitive {kind!r}")
    for t in inputs:
        if not isinstance(t, Tensor):
            raise ContractError(f"{kind}: inputs must be Tensors, got {type(t).__name__}")
    arrays = [t.data for t in inputs]
    out, saved = prim.forward(*arrays, **attrs)
    if not np.isfinite(out).all():
        raise NumericError(f"{kind} produced non-finite output (input shapes {[a.shape for a in arrays]})")
    tape = current_tape()
    needs_grad = tape is not None and prim.backward is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(np.asarray(out), requires_grad=needs_grad)
    if needs_grad:
        tape.record(TapeNode(kind, tuple(inputs), result, saved, attrs))
    return result


def backward(loss: Tensor, tape: ComputationTape) -> dict[str, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Every ``requires_grad`` leaf reached gets its total derivative added to
    ``.grad``. Returns a map from leaf name (or ``leaf<k>`` for unnamed leaves)
    to the gradient contributed by this pass.
    """
    if tape.consumed:
        raise ContractError("tape already consumed by backward()")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any parameter recorded on this tape")
    if not any(n.output is loss for n in tape.nodes):
        raise ContractError("loss was not produced on this tape")
    tape.consumed = True

    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        prim = _REGISTRY[node.kind]
        in_arrays = [t.data for t in node.inputs]
        with np.errstate(all="ignore"):
            in_grads = prim.backward(g, node.saved, *in_arrays, **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise RuntimeError(f"internal: {node.kind} gradient shape {gi.shape} != input shape {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t

    out: dict[str, np.ndarray] = {}
    for k, (key, leaf) in enumerate(leaves.items()):
        g = grads.pop(key).astype(_dtype, copy=False)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for leaf {leaf.name or k}")
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        name = leaf.name or f"leaf{k}"
        if name in out:
            raise RuntimeError(f"internal: duplicate leaf name {name!r} in one backward pass")
        out[name] = g
    tape.nodes.clear()
    return out

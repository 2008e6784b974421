"""Functional spellings of the primitives, used throughout the model code."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import primitives  # noqa: F401  (registers the primitive set)
from .tensor import Tensor, apply_primitive


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def div(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("div", [a, b])


def scalar_mul(a: Tensor, scalar: float) -> Tensor:
    return apply_primitive("scalar-mul", [a], scalar=float(scalar))


def broadcast(a: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("broadcast", [a], shape=tuple(shape))


def add_broadcast(x: Tensor, v: Tensor) -> Tensor:
    """``x + v`` where ``v`` is expanded over the leading axes of ``x``."""
    return add(x, broadcast(v, x.shape))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("linear", [x, w, b])


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return apply_primitive("transpose", [a], axes=tuple(axes) if axes is not None else None)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", [a], shape=tuple(shape))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", list(tensors), axis=axis)


def index_select(a: Tensor, indices, axis: int = 0) -> Tensor:
    return apply_primitive("index-select", [a], indices=np.asarray(indices, dtype=np.intp), axis=axis)


def gather(a: Tensor, indices) -> Tensor:
    return apply_primitive("gather", [a], indices=np.asarray(indices, dtype=np.intp))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply_primitive("sum", [a], axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", [a], axis=axis, keepdims=keepdims)


def exp(a: Tensor) -> Tensor:
    return apply_primitive("exp", [a])


def log(a: Tensor) -> Tensor:
    return apply_primitive("log", [a])


def power(a: Tensor, exponent: float) -> Tensor:
    return apply_primitive("power", [a], exponent=float(exponent))


def sqrt(a: Tensor) -> Tensor:
    return apply_primitive("sqrt", [a])


def relu(a: Tensor) -> Tensor:
    return apply_primitive("relu", [a])


def gelu(a: Tensor) -> Tensor:
    return apply_primitive("gelu", [a])


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", [a], axis=axis)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("log-softmax", [a], axis=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return apply_primitive("layer-norm", [x, gamma, beta], eps=eps)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return apply_primitive("l2-normalize", [a], axis=axis, eps=eps)


def mse(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mse", [a, b])

"""Forward and backward rules for every registered primitive.

Forward functions take raw arrays plus keyword attributes and return
``(output, saved)``; backward functions take ``(grad_out, saved, *inputs,
**attrs)`` and return one gradient (or ``None``) per input.

Broadcasting is limited to scalar-with-tensor (``scalar-add``/``scalar-mul``);
any other expansion must go through the explicit ``broadcast`` primitive.
``matmul``/``linear`` accept a 2-D right operand against a batched left operand,
which is ordinary matrix-product semantics rather than elementwise broadcasting.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, register

_GELU_C = float(np.sqrt(2.0 / np.pi))


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise binary -------------------------------------------------------

def _add_bwd(g, saved, a, b):
    return g, g


@register("add", _add_bwd)
def _add(a, b):
    _same_shape("add", a, b)
    return a + b, None


def _sub_bwd(g, saved, a, b):
    return g, -g


@register("sub", _sub_bwd)
def _sub(a, b):
    _same_shape("sub", a, b)
    return a - b, None


def _mul_bwd(g, saved, a, b):
    return g * b, g * a


@register("mul", _mul_bwd)
def _mul(a, b):
    _same_shape("mul", a, b)
    return a * b, None


def _div_bwd(g, saved, a, b):
    return g / b, -g * a / (b * b)


@register("div", _div_bwd)
def _div(a, b):
    _same_shape("div", a, b)
    return a / b, None


def _scalar_mul_bwd(g, saved, a, scalar):
    return (g * scalar,)


@register("scalar-mul", _scalar_mul_bwd)
def _scalar_mul(a, scalar):
    return a * scalar, None


def _scalar_add_bwd(g, saved, a, scalar):
    return (g,)


@register("scalar-add", _scalar_add_bwd)
def _scalar_add(a, scalar):
    return a + scalar, None


def _broadcast_bwd(g, saved, a, shape):
    lead = g.ndim - a.ndim
    out = g.sum(axis=tuple(range(lead))) if lead else g
    keep = tuple(i for i, n in enumerate(a.shape) if n == 1 and out.shape[i] != 1)
    if keep:
        out = out.sum(axis=keep, keepdims=True)
    return (out,)


@register("broadcast", _broadcast_bwd)
def _broadcast(a, shape):
    """Explicit expansion of ``a`` to ``shape`` (leading axes and size-1 axes)."""
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    ok = lead >= 0 and all(n == 1 or n == m for n, m in zip(a.shape, shape[lead:]))
    if not ok:
        raise DimensionError(f"broadcast: cannot expand {a.shape} to {shape}")
    return np.broadcast_to(a, shape).copy(), None


# -- linear algebra and layout ------------------------------------------------

def _check_matmul(kind, a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"{kind}: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"{kind}: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"{kind}: batch dims differ, {a.shape} @ {b.shape}")


def _matmul_bwd(g, saved, a, b):
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


@register("matmul", _matmul_bwd)
def _matmul(a, b):
    _check_matmul("matmul", a, b)
    return a @ b, None


def _linear_bwd(g, saved, x, w, b):
    g2 = g.reshape(-1, g.shape[-1])
    return g @ w.T, x.reshape(-1, x.shape[-1]).T @ g2, g2.sum(axis=0)


@register("linear", _linear_bwd)
def _linear(x, w, b):
    """``x @ w + b`` with ``w`` of shape (in, out) and ``b`` of shape (out,)."""
    if w.ndim != 2 or b.shape != (w.shape[1],) or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    return x @ w + b, None


def _transpose_bwd(g, saved, a, axes):
    if axes is None:
        return (np.swapaxes(g, -1, -2),)
    return (np.transpose(g, np.argsort(axes)),)


@register("transpose", _transpose_bwd)
def _transpose(a, axes=None):
    """Permute axes; ``axes=None`` swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose: need >= 2 dims, got {a.shape}")
        return np.swapaxes(a, -1, -2), None
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return np.transpose(a, axes), None


def _reshape_bwd(g, saved, a, shape):
    return (g.reshape(a.shape),)


@register("reshape", _reshape_bwd)
def _reshape(a, shape):
    try:
        return a.reshape(shape), None
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}") from exc


def _concat_bwd(g, saved, *arrays, axis):
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


@register("concat", _concat_bwd)
def _concat(*arrays, axis):
    ref = arrays[0]
    ax = axis % ref.ndim
    for x in arrays[1:]:
        if x.ndim != ref.ndim or any(x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: shapes {[y.shape for y in arrays]} differ off axis {axis}")
    return np.concatenate(arrays, axis=axis), None


def _index_select_bwd(g, saved, a, indices, axis):
    out = np.zeros_like(a)
    dst = np.moveaxis(out, axis, 0)
    if np.unique(indices).size == indices.size:
        dst[indices] = np.moveaxis(g, axis, 0)
    else:
        np.add.at(dst, indices, np.moveaxis(g, axis, 0))
    return (out,)


@register("index-select", _index_select_bwd)
def _index_select(a, indices, axis):
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 1:
        raise DimensionError("index-select: indices must be 1-D")
    if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
        raise DimensionError(f"index-select: index out of range for axis {axis} of {a.shape}")
    return np.take(a, indices, axis=axis), None


def _gather_bwd(g, saved, a, indices):
    out = np.zeros_like(a)
    rows = np.arange(a.shape[0])[:, None]
    srt = np.sort(indices, axis=1)
    if (np.diff(srt, axis=1) > 0).all():
        out[rows, indices] = g
    else:
        np.add.at(out, (rows, indices), g)
    return (out,)


@register("gather", _gather_bwd)
def _gather(a, indices):
    """Per-batch row gather: ``out[b, k] = a[b, indices[b, k]]``."""
    indices = np.asarray(indices, dtype=np.intp)
    if a.ndim < 2 or indices.ndim != 2 or indices.shape[0] != a.shape[0]:
        raise DimensionError(f"gather: indices {indices.shape} incompatible with {a.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[1]):
        raise DimensionError(f"gather: index out of range for axis 1 of {a.shape}")
    rows = np.arange(a.shape[0])[:, None]
    return a[rows, indices], None


# -- reductions ---------------------------------------------------------------

def _expand_reduced(g, a, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * a.ndim), a.shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


def _sum_bwd(g, saved, a, axis=None, keepdims=False):
    return (np.array(_expand_reduced(g, a, axis, keepdims)),)


@register("sum", _sum_bwd)
def _sum(a, axis=None, keepdims=False):
    return np.asarray(a.sum(axis=axis, keepdims=keepdims)), None


def _mean_bwd(g, saved, a, axis=None, keepdims=False):
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return (np.array(_expand_reduced(g, a, axis, keepdims)) / count,)


@register("mean", _mean_bwd)
def _mean(a, axis=None, keepdims=False):
    if a.size == 0:
        raise DimensionError("mean: empty input")
    return np.asarray(a.mean(axis=axis, keepdims=keepdims)), None


# -- elementwise unary --------------------------------------------------------

def _exp_bwd(g, out, a):
    return (g * out,)


@register("exp", _exp_bwd)
def _exp(a):
    out = np.exp(a)
    return out, out


def _log_bwd(g, saved, a):
    return (g / a,)


@register("log", _log_bwd)
def _log(a):
    return np.log(a), None


def _power_bwd(g, saved, a, exponent):
    return (g * exponent * a ** (exponent - 1.0),)


@register("power", _power_bwd)
def _power(a, exponent):
    return a**exponent, None


def _sqrt_bwd(g, out, a):
    return (g * 0.5 / out,)


@register("sqrt", _sqrt_bwd)
def _sqrt(a):
    out = np.sqrt(a)
    return out, out


def _relu_bwd(g, saved, a):
    return (g * (a > 0),)


@register("relu", _relu_bwd)
def _relu(a):
    return np.maximum(a, 0), None


def _gelu_bwd(g, t, a):
    dt = (1.0 - t * t) * (_GELU_C * (1.0 + 0.134145 * (a * a)))
    return (g * (0.5 * (1.0 + t) + 0.5 * a * dt),)


@register("gelu", _gelu_bwd)
def _gelu(a):
    """Tanh-form GELU."""
    t = np.tanh(_GELU_C * (a + 0.044715 * (a * a * a)))
    return 0.5 * a * (1.0 + t), t


def _softmax_bwd(g, out, a, axis=-1):
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


@register("softmax", _softmax_bwd)
def _softmax(a, axis=-1):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return out, out


def _log_softmax_bwd(g, out, a, axis=-1):
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


@register("log-softmax", _log_softmax_bwd)
def _log_softmax(a, axis=-1):
    shifted = a - a.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return out, out


def _layer_norm_bwd(g, saved, x, gamma, beta, eps=1e-5):
    xhat, inv = saved
    d = x.shape[-1]
    lead = tuple(range(x.ndim - 1))
    g_gamma = (g * xhat).sum(axis=lead)
    g_beta = g.sum(axis=lead)
    gx_hat = g * gamma
    gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
    return gx, g_gamma, g_beta


@register("layer-norm", _layer_norm_bwd)
def _layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer-norm: affine shapes {gamma.shape}/{beta.shape} vs last dim {d}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _l2_normalize_bwd(g, saved, a, axis=-1, eps=1e-12):
    y, norm = saved
    return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)


@register("l2-normalize", _l2_normalize_bwd)
def _l2_normalize(a, axis=-1, eps=1e-12):
    norm = np.maximum(np.sqrt((a * a).sum(axis=axis, keepdims=True)), eps)
    y = a / norm
    return y, (y, norm)


def _mse_bwd(g, saved, a, b):
    d = (a - b) * (2.0 / a.size) * g
    return d, -d


@register("mse", _mse_bwd)
def _mse(a, b):
    """Mean squared difference over all elements."""
    _same_shape("mse", a, b)
    if a.size == 0:
        raise DimensionError("mse: empty input")
    d = a - b
    return np.asarray((d * d).mean()), None

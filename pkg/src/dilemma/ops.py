"""Differentiable primitives over :class:`~dilemma.tensor.Tensor`.

Elementwise ops broadcast numpy-style; gradients are summed back to the
operand shape. Heavier ops (layer norm, softmax, GELU, the fused losses)
carry hand-written backward passes instead of being composed from smaller
ops, which keeps graphs short on the CPU.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, make_node

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- arithmetic -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_node(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.dtype)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_node(np.ascontiguousarray(out), (a,), backward, "getitem")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[index]`` for an integer array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    n_rows = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise IndexError(f"row index out of range [0, {n_rows})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return make_node(table.data[index], (table,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            g[(slice(None),) * axis + (slice(lo, hi),)] for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_node(out, tuple(tensors), backward, "concat")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = np.ascontiguousarray(np.broadcast_to(a.data, tuple(shape)))
    return make_node(out, (a,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


# -- reductions ---------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)
    return make_node(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes.

    ``a`` is ``(..., m, k)`` and ``b`` is ``(k, n)`` or ``(..., k, n)``.
    """
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, weight.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_node(out, parents, backward, "linear")


# -- nonlinearities -----------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    out = stable_sigmoid(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """1/(1+e^-z) evaluated without overflow for either sign of z."""
    z = np.asarray(z)
    out = np.empty_like(z, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor, approximate: bool = True) -> Tensor:
    """GELU; tanh approximation by default, exact erf form when ``approximate=False``."""
    z = x.data
    if approximate:
        inner = _SQRT_2_OVER_PI * (z + 0.044715 * (z * z * z))
        t = np.tanh(inner)
        out = 0.5 * z * (1.0 + t)

        def backward(g):
            dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * z * z)
            return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner),)
    else:
        from scipy.special import erf

        cdf = 0.5 * (1.0 + erf(z / math.sqrt(2.0)))
        out = (z * cdf).astype(z.dtype)
        pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)

        def backward(g):
            return ((g * (cdf + z * pdf)).astype(z.dtype),)

    return make_node(out, (x,), backward, "gelu")


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``x / temperature`` along ``axis`` (max-subtracted)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)

    return make_node(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        return ((g - probs * g.sum(axis=axis, keepdims=True)) / temperature,)

    return make_node(out, (x,), backward, "log_softmax")


def row_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    return softmax(x, temperature, axis=-1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shape mismatch: {x.shape} vs {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        gx = gg = gbeta = None
        g2 = g.reshape(-1, d)
        if gamma.requires_grad:
            gg = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        if beta.requires_grad:
            gbeta = g2.sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gbeta

    return make_node(out, (x, gamma, beta), backward, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise each column of a (B, F) input with batch statistics; affine step optional.

    Always uses the current batch (no running averages): the heads that use it
    only run during pretraining.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if x.ndim != 2 or x.shape[0] < 2:
        raise DimensionError(f"batch_norm needs a (B>=2, F) input, got {x.shape}")
    if (gamma is None) != (beta is None):
        raise ValueError("gamma and beta must be given together")
    if gamma is not None and (gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],)):
        raise DimensionError(f"batch_norm affine shape mismatch: {x.shape} vs {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=0, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    if gamma is None:
        out, parents = xhat, (x,)
    else:
        out, parents = xhat * gamma.data + beta.data, (x, gamma, beta)

    def backward(g):
        gh = g if gamma is None else g * gamma.data
        gx = None
        if x.requires_grad:
            gx = rstd * (gh - gh.mean(axis=0, keepdims=True) - xhat * (gh * xhat).mean(axis=0, keepdims=True))
        if gamma is None:
            return (gx,)
        gg = (g * xhat).sum(axis=0) if gamma.requires_grad else None
        gb = g.sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return make_node(out, parents, backward, "batch_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / denom,)

    return make_node(out, (x,), backward, "l2_normalize")


# -- fused losses -------------------------------------------------------------

def softplus_np(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def bce_with_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean binary cross-entropy from raw logits, fused to avoid log(sigmoid).

    ``mask`` (same shape, 0/1) selects which entries enter the mean.
    """
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"targets shape {y.shape} != logits shape {logits.shape}")
    z = logits.data
    w = np.ones_like(z) if mask is None else np.asarray(mask, dtype=z.dtype)
    count = w.sum()
    if count == 0:
        raise ValueError("binary cross-entropy over an empty token set")
    per = softplus_np(z) - z * y
    out = np.asarray((per * w).sum() / count, dtype=z.dtype)

    def backward(g):
        return (g * (stable_sigmoid(z) - y) * w / count,)

    return make_node(out, (logits,), backward, "bce_with_logits")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean softmax cross-entropy over the last axis against integer targets."""
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != logits.shape[:-1]:
        raise DimensionError(f"targets shape {t.shape} != logits batch shape {logits.shape[:-1]}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    w = np.ones(t.shape, dtype=z.dtype) if mask is None else np.asarray(mask, dtype=z.dtype)
    count = w.sum()
    if count == 0:
        raise ValueError("cross-entropy over an empty token set")
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * w).sum() / count, dtype=z.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, t[..., None], np.take_along_axis(grad, t[..., None], axis=-1) - 1.0, axis=-1)
        return (g * grad * (w / count)[..., None],)

    return make_node(out, (logits,), backward, "cross_entropy")

"""Differentiable operations on :class:`~multipath.autograd.tensor.Tensor`.

Every op computes its forward value with numpy and registers a backward rule
through :func:`make_op`. Binary elementwise ops broadcast like numpy and
reduce gradients back to each operand's shape.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_op


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype)
    return as_tensor(a), as_tensor(b)


# ----------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return make_op(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply ``x`` by a learned scalar ``s``."""
    return mul(x, s)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """``max(a, lo)``; gradient flows only where ``a > lo``. NaN passes through."""
    keep = ~(a.data <= lo)
    return make_op(np.where(keep, a.data, lo).astype(a.dtype), (a,), lambda g: (g * keep,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,))


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise ``0.5 x^2 / beta`` for ``|x| < beta``, else ``|x| - 0.5 beta``."""
    ax = np.abs(x.data)
    small = ax < beta
    out = np.where(small, 0.5 * x.data * x.data / beta, ax - 0.5 * beta)

    def backward(g):
        return (g * np.where(small, x.data / beta, np.sign(x.data)),)

    return make_op(out.astype(x.dtype), (x,), backward)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout. Identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_op(x.data * mask, (x,), lambda g: (g * mask,))


# ----------------------------------------------------------------------
# reductions and shape ops

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return make_op(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor, start: int = 1) -> Tensor:
    return reshape(x, x.shape[:start] + (int(np.prod(x.shape[start:])),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_op(out, (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, idx) -> Tensor:
    """``x[idx]`` with numpy indexing semantics (basic or advanced)."""
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(np.array(out, copy=True), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return make_op(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ----------------------------------------------------------------------
# linear algebra / layers

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul supports 2-d operands only")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return make_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer ``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_op(out, parents, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (x,), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation of ``x`` (N, C, H, W) with ``weight`` (K, C, kh, kw).

    Output spatial size is ``floor((H + 2 pad - kh) / stride) + 1`` per axis.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cw}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError("conv2d: kernel larger than padded input")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({k},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    # (N, C, Ho, Wo, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(k, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_op(out, parents, backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (window = stride = ``size``).

    Trailing rows/columns that do not fill a window are dropped. Ties route
    the gradient to the first maximum in row-major window order.
    """
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError("max_pool2d: input smaller than window")
    xs = x.data[:, :, :ho * size, :wo * size]
    blocks = xs.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * size, :wo * size] = gb.reshape(n, c, ho, wo, size, size).transpose(
            0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        return (gx,)

    return make_op(out, (x,), backward)


def l2_normalize_scaled(x: Tensor, gamma: Tensor, eps: float = 1e-12,
                        batched: bool = False) -> Tensor:
    """``gamma * x / max(||x||_2, eps)``.

    The norm runs over all elements of ``x``, or over all but the leading
    axis when ``batched`` is true (one norm per leading slice). ``gamma`` is
    a scalar tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    axes = tuple(range(1, x.ndim)) if batched else None
    norm = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=True))
    denom = np.maximum(norm, eps)
    unit = x.data / denom
    gval = gamma.data.reshape(())
    out = gval * unit

    def backward(g):
        big = norm > eps
        proj = (g * unit).sum(axis=axes, keepdims=True)
        gx = np.where(big, gval * (g - unit * proj) / denom, gval * g / denom)
        gg = np.asarray((g * unit).sum()).reshape(gamma.shape)
        return gx.astype(x.dtype), gg.astype(gamma.dtype)

    return make_op(out.astype(x.dtype), (x, gamma), backward)


def cross_entropy_from_probs(probs: Tensor, labels: np.ndarray, floor: float = 1e-12) -> Tensor:
    """Per-row ``-log(max(p[label], floor))`` for a (R, C) probability tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    picked = index(probs, (np.arange(len(labels)), labels))
    return neg(log(clamp_min(picked, floor)))

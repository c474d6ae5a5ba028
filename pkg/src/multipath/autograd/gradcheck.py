"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                 coords: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``t.data`` (in place perturbation).

    Only the flat positions in ``coords`` are evaluated (all by default); the
    rest of the returned array is zero.
    """
    flat = t.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max |a - n| / max(1, |n|)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))))


def gradcheck(fn: Callable[[], Tensor], wrt: Sequence[Tensor], h: float = 1e-5,
              max_coords: Optional[int] = None,
              rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    Args:
        fn: closure building a fresh scalar graph each call.
        wrt: leaf tensors (``requires_grad=True``, float64) to check.
        h: finite-difference step.
        max_coords: if set, check at most this many randomly chosen entries
            per tensor.
        rng: generator used to choose the entries.

    Returns:
        The maximum relative error over all checked entries.
    """
    for t in wrt:
        t.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in wrt:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        num = numeric_grad(fn, t, h=h, coords=coords)
        if coords is None:
            err = max_relative_error(analytic, num)
        else:
            err = max_relative_error(analytic.reshape(-1)[coords], num.reshape(-1)[coords])
        worst = max(worst, err)
    return worst

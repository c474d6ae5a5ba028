"""RoI max pooling with two quantization modes.

``floor_ceil`` snaps the region outward (floor of the start, ceil of the
end); ``round`` rounds both edges to the nearest cell boundary. Each output
bin covers cells ``[start + floor(i L / P), start + ceil((i + 1) L / P))``
of the region, so bins are never empty. A region that quantizes to zero
extent falls back to the single cell at its start.
"""

from __future__ import annotations

import numpy as np

from ..autograd import Tensor, make_op

QUANTIZATION_MODES = ("floor_ceil", "round")


def _edges(lo: np.ndarray, hi: np.ndarray, limit: int, mode: str):
    if mode == "floor_ceil":
        start = np.floor(lo)
        end = np.ceil(hi)
    elif mode == "round":
        start = np.floor(lo + 0.5)
        end = np.floor(hi + 0.5)
    else:
        raise ValueError(f"unknown quantization mode {mode!r}")
    start = np.clip(start, 0, limit - 1).astype(np.int64)
    end = np.clip(end, 0, limit).astype(np.int64)
    end = np.maximum(end, start + 1)
    return start, end


def roi_bins(lo: np.ndarray, hi: np.ndarray, limit: int, out_size: int, mode: str):
    """Per-region bin bounds along one axis: two ``(R, out_size)`` int arrays."""
    start, end = _edges(lo, hi, limit, mode)
    length = (end - start)[:, None]
    i = np.arange(out_size)[None, :]
    b_lo = start[:, None] + (i * length) // out_size
    b_hi = start[:, None] - ((-(i + 1) * length) // out_size)
    return b_lo, b_hi


try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None


def _pool_windows_numpy(feat, batch_index, ylo, yhi, xlo, xhi):
    """Reference gather implementation: returns (out (R,C,P,P), argcell (R,C,P,P))."""
    n, c, h, w = feat.shape
    r, p = ylo.shape
    mh = int((yhi - ylo).max())
    mw = int((xhi - xlo).max())
    # indices past a bin's end repeat its last cell, which leaves the max unchanged
    ys = np.minimum(ylo[:, :, None] + np.arange(mh)[None, None, :], yhi[:, :, None] - 1)
    xs = np.minimum(xlo[:, :, None] + np.arange(mw)[None, None, :], xhi[:, :, None] - 1)
    cell = (batch_index[:, None, None, None, None] * (h * w)
            + ys[:, :, None, :, None] * w
            + xs[:, None, :, None, :]).reshape(r, p, p, mh * mw)
    fhwc = np.ascontiguousarray(feat.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    vals = fhwc[cell]                                   # (R, P, P, M, C)
    arg = vals.argmax(axis=3)                           # (R, P, P, C)
    out = np.take_along_axis(vals, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    winner = np.take_along_axis(cell, arg, axis=3)      # flat (n, y, x) cell ids
    return (np.ascontiguousarray(out.transpose(0, 3, 1, 2)),
            np.ascontiguousarray(winner.transpose(0, 3, 1, 2)))


if numba is not None:
    @numba.njit(cache=True)
    def _pool_windows_jit(feat, batch_index, ylo, yhi, xlo, xhi):  # pragma: no cover - jitted
        n, c, h, w = feat.shape
        r, p = ylo.shape
        out = np.empty((r, c, p, p), dtype=feat.dtype)
        arg = np.empty((r, c, p, p), dtype=np.int64)
        for k in range(r):
            b = batch_index[k]
            for ch in range(c):
                for i in range(p):
                    for j in range(p):
                        best = -np.inf
                        bi = -1
                        for y in range(ylo[k, i], yhi[k, i]):
                            for x in range(xlo[k, j], xhi[k, j]):
                                v = feat[b, ch, y, x]
                                if v > best or bi < 0:
                                    best = v
                                    bi = (b * h + y) * w + x
                        out[k, ch, i, j] = best
                        arg[k, ch, i, j] = bi
        return out, arg


def roi_pool(feat: Tensor, boxes: np.ndarray, batch_index: np.ndarray, stride: float,
             out_size: int = 7, mode: str = "floor_ceil") -> Tensor:
    """Max-pool each box region of ``feat`` (N, C, H, W) to (R, C, out, out).

    ``boxes`` are in image pixels and must already be clipped to the image;
    ``stride`` maps them to feature cells. Gradients route to the argmax cell
    of each bin (first maximum in row-major order on ties).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    batch_index = np.ascontiguousarray(batch_index, dtype=np.int64).reshape(-1)
    n, c, h, w = feat.shape
    p = out_size
    if len(boxes) == 0:
        return make_op(np.zeros((0, c, p, p), dtype=feat.dtype), (feat,),
                       lambda g: (np.zeros_like(feat.data),))
    ylo, yhi = roi_bins(boxes[:, 1] / stride, boxes[:, 3] / stride, h, p, mode)
    xlo, xhi = roi_bins(boxes[:, 0] / stride, boxes[:, 2] / stride, w, p, mode)
    kernel = _pool_windows_jit if numba is not None else _pool_windows_numpy
    out, cells = kernel(np.ascontiguousarray(feat.data), batch_index, ylo, yhi, xlo, xhi)
    # flat index into (N, C, H, W)
    bidx, rem = np.divmod(cells, h * w)
    flat = (bidx * c + np.arange(c)[None, :, None, None]) * (h * w) + rem

    def backward(g):
        acc = np.bincount(flat.reshape(-1), weights=g.reshape(-1), minlength=n * c * h * w)
        return (acc.reshape(n, c, h, w).astype(feat.dtype),)

    return make_op(out, (feat,), backward)

"""Hot numeric kernels with paired numba / numpy implementations.

Every kernel exists twice: ``<name>_numba`` (explicit loops under ``@njit``)
and ``<name>_numpy`` (vectorized). The public ``<name>`` alias points at the
backend chosen by :mod:`encore_bench._accel`. Both variants must agree to
floating-point round-off; ``tests/test_kernels.py`` enforces that and
``benchmarks/bench_kernels.py`` times them against each other.
"""

from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

LOG2 = float(np.log(2.0))


# --------------------------------------------------------------------------
# box error reductions
# --------------------------------------------------------------------------


@njit(cache=True)
def box_mse_numba(pred, gt, horizon):
    n = pred.shape[0]
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for t in range(horizon):
            for c in range(4):
                d = pred[i, t, c] - gt[i, t, c]
                acc += d * d
        out[i] = acc / (4.0 * horizon)
    return out


def box_mse_numpy(pred, gt, horizon):
    d = pred[:, :horizon, :] - gt[:, :horizon, :]
    return np.mean(d * d, axis=(1, 2))


@njit(cache=True)
def center_mse_numba(pred, gt, horizon):
    """Per-sample (C_MSE over ``horizon`` steps, squared center error at the last step)."""
    n = pred.shape[0]
    c_out = np.empty(n)
    cf_out = np.empty(n)
    last = pred.shape[1] - 1
    for i in range(n):
        acc = 0.0
        for t in range(horizon):
            dx = 0.5 * (pred[i, t, 0] + pred[i, t, 2]) - 0.5 * (gt[i, t, 0] + gt[i, t, 2])
            dy = 0.5 * (pred[i, t, 1] + pred[i, t, 3]) - 0.5 * (gt[i, t, 1] + gt[i, t, 3])
            acc += dx * dx + dy * dy
        c_out[i] = acc / (2.0 * horizon)
        dx = 0.5 * (pred[i, last, 0] + pred[i, last, 2]) - 0.5 * (gt[i, last, 0] + gt[i, last, 2])
        dy = 0.5 * (pred[i, last, 1] + pred[i, last, 3]) - 0.5 * (gt[i, last, 1] + gt[i, last, 3])
        cf_out[i] = (dx * dx + dy * dy) / 2.0
    return c_out, cf_out


def center_mse_numpy(pred, gt, horizon):
    pc = 0.5 * (pred[..., 0:2] + pred[..., 2:4])
    gc = 0.5 * (gt[..., 0:2] + gt[..., 2:4])
    d = pc - gc
    sq = d * d
    c = np.mean(sq[:, :horizon, :], axis=(1, 2))
    cf = np.mean(sq[:, -1, :], axis=1)
    return c, cf


# --------------------------------------------------------------------------
# truncation-aware box dimensions
# --------------------------------------------------------------------------


@njit(cache=True)
def adjusted_dims_numba(boxes, widths, heights, ratio, eps):
    """Return (n, 2) adjusted (w, h) and an int8 truncation code per box.

    Code bit 0 = horizontally truncated, bit 1 = vertically truncated.
    """
    n = boxes.shape[0]
    dims = np.empty((n, 2))
    code = np.zeros(n, dtype=np.int8)
    for i in range(n):
        x1 = boxes[i, 0]
        y1 = boxes[i, 1]
        x2 = boxes[i, 2]
        y2 = boxes[i, 3]
        w = x2 - x1
        h = y2 - y1
        horiz = x1 <= eps or x2 >= widths[i] - eps
        vert = y1 <= eps or y2 >= heights[i] - eps
        if horiz and vert:
            a0 = w * h
            a1 = (ratio * h) * h
            a2 = w * (w / ratio)
            if a1 >= a0 and a1 >= a2:
                dims[i, 0] = ratio * h
                dims[i, 1] = h
            elif a2 >= a0:
                dims[i, 0] = w
                dims[i, 1] = w / ratio
            else:
                dims[i, 0] = w
                dims[i, 1] = h
            code[i] = 3
        elif horiz:
            dims[i, 0] = ratio * h
            dims[i, 1] = h
            code[i] = 1
        elif vert:
            dims[i, 0] = w
            dims[i, 1] = w / ratio
            code[i] = 2
        else:
            dims[i, 0] = w
            dims[i, 1] = h
    return dims, code


def adjusted_dims_numpy(boxes, widths, heights, ratio, eps):
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    w = x2 - x1
    h = y2 - y1
    horiz = (x1 <= eps) | (x2 >= widths - eps)
    vert = (y1 <= eps) | (y2 >= heights - eps)
    from_h = np.stack([ratio * h, h], axis=1)
    from_w = np.stack([w, w / ratio], axis=1)
    plain = np.stack([w, h], axis=1)

    a0 = w * h
    a1 = (ratio * h) * h
    a2 = w * (w / ratio)
    both_pick = np.where(
        ((a1 >= a0) & (a1 >= a2))[:, None],
        from_h,
        np.where((a2 >= a0)[:, None], from_w, plain),
    )
    dims = np.where(
        (horiz & vert)[:, None],
        both_pick,
        np.where(horiz[:, None], from_h, np.where(vert[:, None], from_w, plain)),
    )
    code = (horiz.astype(np.int8) | (vert.astype(np.int8) << 1)).astype(np.int8)
    return dims, code


# --------------------------------------------------------------------------
# logcosh
# --------------------------------------------------------------------------


@njit(cache=True)
def logcosh_numba(x):
    flat = x.ravel()
    out = np.empty(flat.shape[0])
    for i in range(flat.shape[0]):
        a = abs(flat[i])
        out[i] = a + np.log1p(np.exp(-2.0 * a)) - LOG2
    return out.reshape(x.shape)


def logcosh_numpy(x):
    a = np.abs(x)
    return a + np.log1p(np.exp(-2.0 * a)) - LOG2


@njit(cache=True)
def logcosh_grad_numba(x):
    flat = x.ravel()
    out = np.empty(flat.shape[0])
    for i in range(flat.shape[0]):
        out[i] = np.tanh(flat[i])
    return out.reshape(x.shape)


def logcosh_grad_numpy(x):
    return np.tanh(x)


if USE_NUMBA:
    box_mse = box_mse_numba
    center_mse = center_mse_numba
    adjusted_dims = adjusted_dims_numba
else:
    box_mse = box_mse_numpy
    center_mse = center_mse_numpy
    adjusted_dims = adjusted_dims_numpy

# numpy's vectorized exp/tanh outrun a scalar jit loop here (see
# benchmarks/bench_kernels.py), so the elementwise pair always uses numpy.
logcosh = logcosh_numpy
logcosh_grad = logcosh_grad_numpy


def as_boxes3(a) -> np.ndarray:
    """Coerce to a C-contiguous float64 (n, t, 4) array."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 4:
        raise ValueError(f"expected (n, t, 4) boxes, got shape {arr.shape}")
    return arr

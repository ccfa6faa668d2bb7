"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    Entries whose gradient magnitude is below ``floor`` are effectively
    compared in absolute terms.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(fn: Callable[[], float], x: Tensor, h: float = 1e-5,
                 indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``x.data`` (in place perturbation).

    With ``indices`` only those entries are probed; others stay NaN.
    """
    grad = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    it = indices if indices is not None else list(np.ndindex(*x.shape))
    for idx in it:
        old = x.data[idx]
        x.data[idx] = old + h
        fp = fn()
        x.data[idx] = old - h
        fm = fn()
        x.data[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]


# multiple of the loss's unit roundoff taken as the central-difference noise
ROUNDOFF_MARGIN = 16.0


def resolution_floor(loss_value: float, h: float, tol: float) -> float:
    """Smallest gradient magnitude a float64 central difference can certify to ``tol``.

    The loss itself carries rounding noise of about ``eps * |L|``, so the
    difference quotient is uncertain by roughly ``eps * |L| / h``. Entries
    below ``margin * eps * |L| / (h * tol)`` cannot be checked to relative
    precision ``tol`` and are compared against this floor instead.
    """
    eps = np.finfo(np.float64).eps
    return ROUNDOFF_MARGIN * eps * max(abs(loss_value), 1.0) / (h * tol)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0,
                    floor: float | str = 1e-7, tol: float = 1e-4) -> list[float]:
    """Relative error per parameter between tape and central-difference gradients.

    ``max_entries`` caps the number of probed entries per parameter (a
    seeded random subset); ``None`` probes every entry. ``floor="auto"``
    uses :func:`resolution_floor` for the loss at hand (needed for large
    composite losses, where many true gradient entries sit below the
    finite-difference noise).
    """
    analytic = analytic_grads(loss_fn, params)
    if floor == "auto":
        floor = max(1e-7, resolution_floor(float(loss_fn().data), h, tol))
    rng = np.random.default_rng(seed)
    errors = []

    def f():
        return float(loss_fn().data)

    for p, a in zip(params, analytic):
        if max_entries is not None and p.data.size > max_entries:
            flat = rng.choice(p.data.size, size=max_entries, replace=False)
            idx = [np.unravel_index(i, p.shape) for i in np.sort(flat)]
            num = numeric_grad(f, p, h, idx)
            sel = tuple(np.array(i) for i in zip(*idx))
            errors.append(relative_error(a[sel], num[sel], floor))
        else:
            errors.append(relative_error(a, numeric_grad(f, p, h), floor))
    return errors

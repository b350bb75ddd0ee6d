"""Shared test oracles, kept independent of the code paths they check."""

from __future__ import annotations

from typing import Callable

import numpy as np

from avfusion.tensor import Tensor


def finite_difference_gradient(f: Callable[[], float], t: Tensor,
                               eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. every entry of ``t``.

    Perturbs ``t.data`` in place and re-runs the forward closure, so it never
    touches the analytic backward machinery it is used to verify.
    """
    flat = t.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(t.data.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = 1e-6) -> float:
    """Max abs deviation scaled by the numeric gradient's magnitude.

    The floor keeps exact-zero gradients (where central differences return
    pure truncation noise ~1e-11) from inflating the ratio.
    """
    denom = max(np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / denom)


def gradients_close(analytic: np.ndarray, numeric: np.ndarray,
                    rtol: float, atol: float = 1e-9) -> bool:
    """Per-component |a - f| <= atol + rtol * |f| (atol absorbs FD noise)."""
    return bool(np.all(np.abs(analytic - numeric) <= atol + rtol * np.abs(numeric)))


def brute_force_edit_distance(ref: list, hyp: list) -> int:
    """Exhaustive minimum edit distance by recursion (exponential; tiny inputs)."""

    def rec(i: int, j: int) -> int:
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        best = 1 + rec(i + 1, j)          # deletion
        best = min(best, 1 + rec(i, j + 1))  # insertion
        cost = 0 if ref[i] == hyp[j] else 1
        best = min(best, cost + rec(i + 1, j + 1))
        return best

    return rec(0, 0)

"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], Tensor], p: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. every entry of ``p`` (in place perturbation)."""
    flat = p.data.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        with no_grad():
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"f is non-finite near entry {i} of {p.name or 'param'}")
        out[i] = (hi - lo) / (2.0 * eps)
    return out.reshape(p.shape)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    per_param: bool = False,
):
    """Max relative error between backprop and central differences.

    ``f`` is a zero-argument closure reading ``params`` (which are perturbed
    in place), returning a scalar tensor.  The error for each entry is
    ``|a - n| / max(1, |a|, |n|)``.  With ``per_param`` a dict from parameter
    position to its max error is returned alongside the overall max.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.requires_grad = True
    loss = f()
    grads = backward(loss)
    worst = 0.0
    report: dict[int, float] = {}
    for i, p in enumerate(params):
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        analytic = analytic.copy()
        numeric = numeric_grad(f, p, eps)
        err = float(relative_error(analytic, numeric).max()) if p.data.size else 0.0
        report[i] = err
        worst = max(worst, err)
    if per_param:
        return worst, report
    return worst

"""Central-finite-difference gradient oracle.

Used by the test suite and the `vf verify` subcommand to check every
analytic gradient against an independent numerical estimate. The oracle
only ever calls the loss function; it knows nothing about backward passes.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


def numerical_gradient(
    loss_fn: Callable[[], float], param: np.ndarray, eps: float = 1e-4
) -> np.ndarray:
    """(f(p + eps) - f(p - eps)) / (2 eps) entry by entry, in place."""
    grad = np.zeros_like(param, dtype=np.float64)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus = loss_fn()
        flat[idx] = orig - eps
        f_minus = loss_fn()
        flat[idx] = orig
        gflat[idx] = (f_plus - f_minus) / (2 * eps)
    return grad


def max_relative_error(
    analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray]
) -> tuple[float, str]:
    """Worst relative error across all tensors: |a - n| / max(|a| + |n|, 1e-8)."""
    worst, worst_name = 0.0, ""
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        err = float(np.max(np.abs(a - n) / denom))
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name


def check_gradients(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    eps: float = 1e-4,
) -> tuple[float, str]:
    """FD-check every parameter tensor; returns (worst rel. error, tensor)."""
    numeric = {name: numerical_gradient(loss_fn, p, eps) for name, p in params.items()}
    return max_relative_error(analytic, numeric)

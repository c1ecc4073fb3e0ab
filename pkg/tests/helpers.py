"""Shared test utilities: central finite differences and gradient comparison."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from docstruct.autograd import Tensor

# Relative-error floor: below this magnitude central differences at h=1e-5
# are dominated by float64 cancellation noise, so comparisons switch to an
# absolute scale.
REL_FLOOR = 1e-6


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def fd_grad(
    f: Callable[[], Tensor], param: Tensor, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of the scalar f() w.r.t. every param entry."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f().item()
        flat[i] = orig - h
        down = f().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def check_grads(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    tol: float = 1e-4,
    h: float = 1e-5,
) -> None:
    """Assert analytic grads of f() match central differences for each param."""
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    for i, p in enumerate(params):
        numeric = fd_grad(f, p, h=h)
        err = rel_err(p.grad, numeric)
        assert err < tol, f"param {i}: rel err {err:.3e} >= {tol}"

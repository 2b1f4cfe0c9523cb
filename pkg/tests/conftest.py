"""Shared test fixtures and independent numerical oracles.

The oracles here deliberately avoid the package's own machinery: gradient
checks use central finite differences on the forward pass only, spline
values use a textbook recursive Cox-de Boor, and inverses use bisection.
"""

import numpy as np
import pytest


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x (elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def cox_de_boor(knots, i: int, p: int, t: float) -> float:
    """Textbook recursive definition of one B-spline basis function."""
    if p == 0:
        if knots[i] <= t < knots[i + 1]:
            return 1.0
        # close the final non-empty interval on the right
        if t == knots[-1] and knots[i] < knots[i + 1] == knots[-1]:
            return 1.0
        return 0.0
    left = 0.0
    if knots[i + p] > knots[i]:
        left = (t - knots[i]) / (knots[i + p] - knots[i]) * cox_de_boor(knots, i, p - 1, t)
    right = 0.0
    if knots[i + p + 1] > knots[i + 1]:
        right = (knots[i + p + 1] - t) / (knots[i + p + 1] - knots[i + 1]) * cox_de_boor(
            knots, i + 1, p - 1, t
        )
    return left + right


def bisect_inverse(f, y: float, lo: float = 0.0, hi: float = 1.0, iters: int = 200) -> float:
    """Invert an increasing scalar function by bisection."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)

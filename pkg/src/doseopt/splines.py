"""Clamped B-spline bases on [0, 1] and their tensor products.

The default basis is quadratic with interior knots at 1/3 and 2/3, giving
five basis functions that sum to one everywhere, hit one-hot vectors at
the endpoints, and are C^1 across the interior knots.  Multi-dimensional
dosages use the tensor (Kronecker) product of per-dimension bases, with
the first dimension's index varying slowest in the flattened layout.

Functions come in two flavours: plain numpy (``eval_basis`` and friends)
and tape-recorded (``basis_node`` / ``tensor_basis_node``) for use inside
differentiable models, where the gradient with respect to the dosage runs
through the analytic derivative of the basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class SplineSpec:
    """One-dimensional clamped B-spline basis on [0, 1]."""

    degree: int = 2
    interior_knots: tuple[float, ...] = (1.0 / 3.0, 2.0 / 3.0)

    def __post_init__(self):
        if self.degree < 1:
            raise ConfigurationError(f"spline degree must be >= 1, got {self.degree}")
        ks = self.interior_knots
        if any(not (0.0 < k < 1.0) for k in ks):
            raise ConfigurationError(f"interior knots must lie in (0, 1): {ks}")
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ConfigurationError(f"interior knots must be strictly increasing: {ks}")

    @property
    def knots(self) -> np.ndarray:
        """Full clamped knot vector with (degree + 1)-fold end knots."""
        return np.array(
            [0.0] * (self.degree + 1) + list(self.interior_knots) + [1.0] * (self.degree + 1)
        )

    @property
    def basis_count(self) -> int:
        return len(self.interior_knots) + self.degree + 1


def _check_domain(t: np.ndarray) -> None:
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise DomainError(
            f"dosage values must lie in [0, 1], got range [{t.min()}, {t.max()}]"
        )


def _all_bases(knots: np.ndarray, degree: int, t: np.ndarray) -> np.ndarray:
    """Cox-de Boor recursion for every basis function at once.

    Returns (len(t), n_bases) where n_bases = len(knots) - degree - 1.
    The right endpoint is treated as belonging to the last non-empty
    interval so the basis is exactly one-hot at t = 1.
    """
    n_int = len(knots) - 1
    N = np.zeros((t.shape[0], n_int))
    for i in range(n_int):
        lo, hi = knots[i], knots[i + 1]
        if hi > lo:
            N[:, i] = (t >= lo) & (t < hi)
    # fold t == 1 into the last non-degenerate interval
    last = max(i for i in range(n_int) if knots[i + 1] > knots[i])
    N[t == knots[-1], last] = 1.0
    for d in range(1, degree + 1):
        prev = N
        N = np.zeros((t.shape[0], n_int - d))
        for i in range(n_int - d):
            den_l = knots[i + d] - knots[i]
            den_r = knots[i + d + 1] - knots[i + 1]
            acc = N[:, i]
            if den_l > 0.0:
                acc = acc + (t - knots[i]) / den_l * prev[:, i]
            if den_r > 0.0:
                acc = acc + (knots[i + d + 1] - t) / den_r * prev[:, i + 1]
            N[:, i] = acc
    return N


def eval_basis(spec: SplineSpec, t) -> np.ndarray:
    """Basis values; scalar t -> (K,), array (B,) -> (B, K)."""
    arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    _check_domain(arr)
    out = _all_bases(spec.knots, spec.degree, arr)
    return out[0] if np.isscalar(t) or np.asarray(t).ndim == 0 else out


def eval_basis_grad(spec: SplineSpec, t) -> np.ndarray:
    """First derivatives of every basis function.

    Uses the standard relation N'_{i,p} = p * (N_{i,p-1}/(u_{i+p}-u_i)
    - N_{i+1,p-1}/(u_{i+p+1}-u_{i+1})), dropping terms with degenerate
    denominators.
    """
    arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    _check_domain(arr)
    knots, p = spec.knots, spec.degree
    lower = _all_bases(knots, p - 1, arr)  # (B, K + 1)
    K = spec.basis_count
    out = np.zeros((arr.shape[0], K))
    for i in range(K):
        den_l = knots[i + p] - knots[i]
        den_r = knots[i + p + 1] - knots[i + 1]
        if den_l > 0.0:
            out[:, i] += p * lower[:, i] / den_l
        if den_r > 0.0:
            out[:, i] -= p * lower[:, i + 1] / den_r
    return out[0] if np.isscalar(t) or np.asarray(t).ndim == 0 else out


@dataclass(frozen=True)
class TensorBasisSpec:
    """Tensor product of per-dimension spline bases."""

    dims: tuple[SplineSpec, ...] = field(default_factory=lambda: (SplineSpec(),))

    def __post_init__(self):
        if not self.dims:
            raise ConfigurationError("tensor basis needs at least one dimension")

    @classmethod
    def for_dims(cls, p: int, spec: SplineSpec | None = None) -> "TensorBasisSpec":
        return cls(dims=tuple(spec or SplineSpec() for _ in range(p)))

    @property
    def p(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return prod(s.basis_count for s in self.dims)


def tensor_product(tspec: TensorBasisSpec, t) -> np.ndarray:
    """Flattened tensor-product basis.

    t of shape (p,) -> (size,); (B, p) -> (B, size).  Dimension 0's basis
    index varies slowest in the flattened output.
    """
    arr = np.asarray(t, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != tspec.p:
        raise DomainError(
            f"expected dosages with {tspec.p} columns, got shape {arr.shape}"
        )
    out = eval_basis(tspec.dims[0], arr[:, 0])
    for j in range(1, tspec.p):
        nxt = eval_basis(tspec.dims[j], arr[:, j])
        B, k1 = out.shape
        out = (out[:, :, None] * nxt[:, None, :]).reshape(B, k1 * nxt.shape[1])
    return out[0] if single else out


# ---------------------------------------------------------------------
# tape-recorded versions
# ---------------------------------------------------------------------

ad.PRIMITIVE_OPS.append("basis_node")


def basis_node(spec: SplineSpec, t: "ad.Node") -> "ad.Node":
    """Differentiable basis evaluation: t (B,) -> (B, K).

    The backward pass routes the output gradient through the analytic
    basis derivative, so d(loss)/dt is exact (up to the kinks at knots,
    where the one-sided derivative from the right is used).
    """
    t = ad.as_node(t)
    values = eval_basis(spec, t.value)
    def bw(g):
        return ((g * eval_basis_grad(spec, t.value)).sum(axis=-1),)
    return ad.make_node(values, (t,), bw)


def tensor_basis_node(tspec: TensorBasisSpec, t: "ad.Node") -> "ad.Node":
    """Differentiable tensor-product basis: t (B, p) -> (B, size)."""
    t = ad.as_node(t)
    if t.value.ndim != 2 or t.value.shape[1] != tspec.p:
        raise DomainError(
            f"expected dosage node of shape (B, {tspec.p}), got {t.value.shape}"
        )
    out = basis_node(tspec.dims[0], _col(t, 0))
    for j in range(1, tspec.p):
        out = ad.row_kron(out, basis_node(tspec.dims[j], _col(t, j)))
    return out


def _col(t: "ad.Node", j: int) -> "ad.Node":
    """Column j of a (B, p) node as a (B,) node."""
    sl = ad.slice_last(t, j, j + 1)
    return ad.reshape(sl, (t.value.shape[0],))

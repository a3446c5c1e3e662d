"""Polynomial and spline bases with their smoothness penalties.

Bernstein bases parameterize the monotone outcome transformation; B-spline
bases and difference penalties parameterize smooth feature effects. Both
evaluators clamp out-of-range inputs to the training domain and report how
many rows were clamped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.stats import binom

from .exceptions import DataValidationError

# Relative padding applied around the observed outcome range so that new
# observations slightly outside the training range stay in the interior.
DEFAULT_SUPPORT_PADDING = 0.05


@dataclass(frozen=True)
class BernsteinBasis:
    """Bernstein polynomial basis of a fixed order on a bounded interval."""

    order: int
    lower: float
    upper: float

    def __post_init__(self):
        if self.order < 1:
            raise DataValidationError(f"Bernstein order must be >= 1, got {self.order}")
        if not np.isfinite(self.lower) or not np.isfinite(self.upper):
            raise DataValidationError("Bernstein support must be finite")
        if self.upper <= self.lower:
            raise DataValidationError(
                f"Bernstein support is empty: [{self.lower}, {self.upper}]"
            )

    @classmethod
    def from_data(cls, y, order: int, padding: float = DEFAULT_SUPPORT_PADDING):
        """Build a basis whose support covers the data with relative padding."""
        arr = np.asarray(y, dtype=np.float64)
        lo, hi = float(arr.min()), float(arr.max())
        if hi <= lo:
            raise DataValidationError("cannot build a Bernstein basis on constant data")
        pad = padding * (hi - lo)
        return cls(order=order, lower=lo - pad, upper=hi + pad)

    @property
    def num_functions(self) -> int:
        return self.order + 1

    def normalize(self, y, counter: dict | None = None) -> np.ndarray:
        """Map y onto [0, 1], clamping values outside the support."""
        arr = np.asarray(y, dtype=np.float64)
        t = (arr - self.lower) / (self.upper - self.lower)
        clipped = np.clip(t, 0.0, 1.0)
        if counter is not None:
            counter["clamped"] = counter.get("clamped", 0) + int(
                np.count_nonzero(t != clipped)
            )
        return clipped


def _bernstein_design(t: np.ndarray, order: int) -> np.ndarray:
    # binom.pmf evaluates C(M,m) t^m (1-t)^(M-m) in log space, which stays
    # accurate for orders well above 30 where direct powers would under- or
    # overflow.
    m = np.arange(order + 1)
    return binom.pmf(m[None, :], order, t[:, None])


def bernstein_eval(y, basis: BernsteinBasis, counter: dict | None = None) -> np.ndarray:
    """Evaluate all basis polynomials at y; rows sum to one.

    Returns an array of shape (n, order + 1).
    """
    t = basis.normalize(y, counter)
    return _bernstein_design(t, basis.order)


def bernstein_deriv(y, basis: BernsteinBasis, counter: dict | None = None) -> np.ndarray:
    """Evaluate the y-derivative of each basis polynomial; rows sum to zero.

    Uses the order-reduction identity: the derivative of the degree-M basis
    is a difference of neighboring degree-(M-1) polynomials scaled by M.
    """
    t = basis.normalize(y, counter)
    M = basis.order
    scale = M / (basis.upper - basis.lower)
    lower_design = _bernstein_design(t, M - 1) if M >= 1 else np.ones((t.shape[0], 1))
    out = np.zeros((t.shape[0], M + 1))
    # d/dy B_{m,M} = M (B_{m-1,M-1} - B_{m,M-1}) / (upper - lower), with the
    # out-of-range terms at m=0 and m=M dropped.
    out[:, 0] = -scale * lower_design[:, 0]
    out[:, M] = scale * lower_design[:, M - 1]
    for m in range(1, M):
        out[:, m] = scale * (lower_design[:, m - 1] - lower_design[:, m])
    return out


@dataclass(frozen=True)
class SplineBasis:
    """Cubic (by default) B-spline basis on equally spaced knots."""

    num_basis: int
    degree: int
    knots: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.degree < 1:
            raise DataValidationError(f"spline degree must be >= 1, got {self.degree}")
        if self.num_basis < self.degree + 1:
            raise DataValidationError(
                f"need at least degree+1={self.degree + 1} basis functions, "
                f"got {self.num_basis}"
            )
        expected = self.num_basis + self.degree + 1
        if self.knots.shape != (expected,):
            raise DataValidationError(
                f"knot vector must have length {expected}, got {self.knots.shape}"
            )

    @classmethod
    def from_data(cls, x, num_basis: int, degree: int = 3):
        """Equally spaced knots over the data range, extended by the degree."""
        arr = np.asarray(x, dtype=np.float64)
        if num_basis <= degree:
            raise DataValidationError(
                f"num_basis must exceed the degree, got {num_basis} <= {degree}"
            )
        lo, hi = float(arr.min()), float(arr.max())
        if hi <= lo:
            raise DataValidationError("cannot build a spline basis on a constant feature")
        n_intervals = num_basis - degree
        step = (hi - lo) / n_intervals
        knots = lo + step * np.arange(-degree, n_intervals + degree + 1)
        return cls(num_basis=num_basis, degree=degree, knots=knots)

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[self.degree]), float(self.knots[-self.degree - 1])


def bspline_eval(x, basis: SplineBasis, counter: dict | None = None) -> np.ndarray:
    """Evaluate the spline basis at x, clamping to the training domain.

    Returns a dense array of shape (n, num_basis); rows sum to one.
    """
    arr = np.asarray(x, dtype=np.float64)
    lo, hi = basis.domain
    clipped = np.clip(arr, lo, hi)
    if counter is not None:
        counter["clamped"] = counter.get("clamped", 0) + int(
            np.count_nonzero(arr != clipped)
        )
    design = BSpline.design_matrix(clipped, basis.knots, basis.degree)
    return np.asarray(design.todense())


def tensor_basis(bx: np.ndarray, bz: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product of two design matrices.

    Row i of the result is kron(bx[i], bz[i]); output column j*Q+q pairs
    column j of bx with column q of bz.
    """
    if bx.shape[0] != bz.shape[0]:
        raise DataValidationError(
            f"row counts differ: {bx.shape[0]} vs {bz.shape[0]}"
        )
    n = bx.shape[0]
    out = bx[:, :, None] * bz[:, None, :]
    return out.reshape(n, bx.shape[1] * bz.shape[1])


@dataclass(frozen=True)
class PenaltyMatrix:
    """Symmetric positive semi-definite penalty with a known null space."""

    matrix: np.ndarray = field(repr=False)
    nullspace_dim: int

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DataValidationError(f"penalty must be square, got shape {m.shape}")
        if not np.allclose(m, m.T, atol=1e-10):
            raise DataValidationError("penalty must be symmetric")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def difference_penalty(num_coef: int, order: int = 2) -> PenaltyMatrix:
    """Squared difference penalty D'D of the given order.

    The null space contains polynomials up to degree order-1, so its
    dimension equals the order.
    """
    if order < 1:
        raise DataValidationError(f"difference order must be >= 1, got {order}")
    if num_coef <= order:
        raise DataValidationError(
            f"need more than {order} coefficients for an order-{order} penalty, "
            f"got {num_coef}"
        )
    d = np.diff(np.eye(num_coef), n=order, axis=0)
    return PenaltyMatrix(matrix=d.T @ d, nullspace_dim=order)


def kron_sum_penalty(
    pen_feature: PenaltyMatrix,
    lam_feature: float,
    pen_outcome: PenaltyMatrix,
    lam_outcome: float,
    n_feature: int,
) -> PenaltyMatrix:
    """Anisotropic penalty for an outcome-by-feature coefficient matrix.

    Operates on a coefficient vector that stacks the outcome-direction
    coefficients one feature column at a time (outcome index fastest).
    The feature-direction penalty therefore expands to
    kron(pen_feature, I) and the outcome-direction penalty to the
    block-diagonal kron(I, pen_outcome), one block per feature column.
    """
    if lam_feature < 0 or lam_outcome < 0:
        raise DataValidationError("penalty weights must be non-negative")
    if pen_feature.dim != n_feature:
        raise DataValidationError(
            "feature-direction penalty has dimension "
            f"{pen_feature.dim}, expected {n_feature}"
        )
    dim_out = pen_outcome.dim
    total = lam_feature * np.kron(
        pen_feature.matrix, np.eye(dim_out)
    ) + lam_outcome * np.kron(np.eye(n_feature), pen_outcome.matrix)
    if lam_feature > 0 and lam_outcome > 0:
        null_dim = pen_feature.nullspace_dim * pen_outcome.nullspace_dim
    elif lam_feature > 0:
        null_dim = pen_feature.nullspace_dim * dim_out
    elif lam_outcome > 0:
        null_dim = n_feature * pen_outcome.nullspace_dim
    else:
        null_dim = n_feature * dim_out
    return PenaltyMatrix(matrix=total, nullspace_dim=null_dim)

"""Cubic B-spline and truncated power bases on the unit interval.

Everything here works on covariates already rescaled to [0, 1]. The
O'Sullivan mixed-model design (X, Z) is built from the exact integrated
squared second-derivative penalty.
"""

from dataclasses import dataclass, field

import numpy as np

DEGREE = 3


@dataclass(frozen=True)
class KnotVector:
    """Clamped cubic knot sequence on [0, 1].

    Attributes
    ----------
    interior : ndarray, shape (K,)
        Strictly increasing interior knots inside (0, 1).
    full : ndarray, shape (K + 8,)
        Interior knots padded with four copies of 0 and of 1.
    """

    interior: np.ndarray
    full: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        interior = np.asarray(self.interior, dtype=float).reshape(-1)
        if not np.all(np.isfinite(interior)):
            raise ValueError("knots must be finite")
        if interior.size and (interior[0] <= 0.0 or interior[-1] >= 1.0):
            raise ValueError("interior knots must lie strictly inside (0, 1)")
        if np.any(np.diff(interior) <= 0.0):
            raise ValueError("interior knots must be strictly increasing")
        interior.setflags(write=False)
        full = np.concatenate([np.zeros(DEGREE + 1), interior, np.ones(DEGREE + 1)])
        full.setflags(write=False)
        object.__setattr__(self, "interior", interior)
        object.__setattr__(self, "full", full)

    @property
    def K(self):
        return self.interior.size

    @property
    def n_basis(self):
        return self.interior.size + DEGREE + 1

    def greville(self):
        """Knot averages t_{j+1..j+3}; distinct for a clamped cubic sequence."""
        t = self.full
        return np.array([t[j + 1:j + DEGREE + 1].mean() for j in range(self.n_basis)])


def make_knots(K, domain=(0.0, 1.0)):
    """Evenly spaced interior knots, returned on the normalised [0, 1] scale.

    ``domain`` is only validated: the knots always live on [0, 1] and the
    caller rescales covariates with :func:`rescale`.
    """
    K = int(K)
    if K < 0:
        raise ValueError("K must be non-negative")
    lo, hi = (float(v) for v in domain)
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
        raise ValueError(f"degenerate covariate domain {domain!r}")
    return KnotVector(np.arange(1, K + 1) / (K + 1.0))


def _check_unit(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("covariate values must lie in [0, 1]; rescale first")
    return x


def _basis_all(full, x, degree):
    """Cox-de Boor recursion for every basis function of ``degree``.

    Returns an array of shape (len(x), len(full) - degree - 1). The right
    endpoint belongs to the last non-empty knot span, so the clamped basis
    is right-continuous at x = 1.
    """
    m = full.size
    last = np.max(np.nonzero(full[1:] > full[:-1])[0])
    B = ((full[:-1][None, :] <= x[:, None]) & (x[:, None] < full[1:][None, :])).astype(float)
    B[x == full[-1], last] = 1.0
    for d in range(1, degree + 1):
        nb = m - d - 1
        left_den = full[d:d + nb] - full[:nb]
        right_den = full[d + 1:d + 1 + nb] - full[1:1 + nb]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (x[:, None] - full[:nb]) / left_den, 0.0)
            right = np.where(right_den > 0, (full[d + 1:d + 1 + nb] - x[:, None]) / right_den, 0.0)
        B = left * B[:, :nb] + right * B[:, 1:nb + 1]
    return B


def eval_bspline_basis(knots, x):
    """Cubic B-spline basis values at ``x`` (scalar or array).

    A scalar gives a vector of length K + 4; an array of n points gives an
    (n, K + 4) matrix.
    """
    x = _check_unit(x)
    B = _basis_all(knots.full, np.atleast_1d(x), DEGREE)
    return B[0] if x.ndim == 0 else B


def eval_bspline_derivative(knots, x, order):
    """Derivative of the cubic basis functions, via the differencing recursion."""
    x = _check_unit(x)
    xs = np.atleast_1d(x)
    t = knots.full
    B = _basis_all(t, xs, DEGREE - order)
    for p in range(DEGREE - order + 1, DEGREE + 1):
        nb = t.size - p - 1
        den_a = t[p:p + nb] - t[:nb]
        den_b = t[p + 1:p + 1 + nb] - t[1:1 + nb]
        with np.errstate(divide="ignore", invalid="ignore"):
            ca = np.where(den_a > 0, p / den_a, 0.0)
            cb = np.where(den_b > 0, p / den_b, 0.0)
        B = ca * B[:, :nb] - cb * B[:, 1:nb + 1]
    return B[0] if x.ndim == 0 else B


def eval_truncated_power_basis(knots, x):
    """(1, x, x^2, x^3, (x - g_1)_+^3, ..., (x - g_K)_+^3)."""
    x = _check_unit(x)
    xs = np.atleast_1d(x)[:, None]
    poly = xs ** np.arange(DEGREE + 1)
    trunc = np.maximum(xs - knots.interior[None, :], 0.0) ** DEGREE
    out = np.hstack([poly, trunc])
    return out[0] if x.ndim == 0 else out


def change_of_basis(knots):
    """Matrix T with ``truncated_power(x) @ T == bspline(x)`` for all x.

    Both bases are collocated at the Greville abscissae, which are distinct
    for any valid clamped knot vector, and the square system is solved.
    """
    g = knots.greville()
    A_tp = eval_truncated_power_basis(knots, g)
    A_bs = eval_bspline_basis(knots, g)
    return np.linalg.solve(A_tp, A_bs)


_GAUSS2 = np.array([-1.0, 1.0]) / np.sqrt(3.0)


def penalty_matrix(knots):
    """Omega[k, k'] = integral over [0, 1] of B_k''(x) B_k''(x) dx.

    Second derivatives of cubic B-splines are linear on each knot span, so a
    two-point Gauss-Legendre rule per span integrates the products exactly.
    """
    breaks = np.unique(knots.full)
    a, b = breaks[:-1], breaks[1:]
    half = 0.5 * (b - a)
    nodes = (0.5 * (a + b))[:, None] + half[:, None] * _GAUSS2[None, :]
    weights = np.repeat(half, 2)
    D2 = eval_bspline_derivative(knots, nodes.reshape(-1), 2)
    omega = (D2 * weights[:, None]).T @ D2
    return 0.5 * (omega + omega.T)


@dataclass(frozen=True)
class PenaltyDesign:
    """O'Sullivan mixed-model design for the centring mean.

    ``X`` holds [1, x_i] and ``Z = B @ UZ @ diag(dZ ** -0.5)`` with ``dZ`` the
    K + 2 positive eigenvalues of ``omega``.
    """

    omega: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    dZ: np.ndarray
    UZ: np.ndarray
    U: np.ndarray
    d: np.ndarray

    @property
    def z_map(self):
        """Linear map from B-spline rows to Z rows."""
        return self.UZ / np.sqrt(self.dZ)[None, :]


def eigen_tolerance(d):
    return d.size * np.finfo(float).eps * np.max(np.abs(d))


def osullivan_design(knots, xs):
    xs = np.atleast_1d(_check_unit(xs))
    omega = penalty_matrix(knots)
    d, U = np.linalg.eigh(omega)
    tol = eigen_tolerance(d)
    positive = d > tol
    if positive.sum() != knots.n_basis - 2:
        raise ArithmeticError(
            f"penalty has {positive.sum()} eigenvalues above {tol:.3g}, expected {knots.n_basis - 2}"
        )
    # the two null eigenvalues must sit well below the cutoff, otherwise the split is ambiguous
    if np.max(np.abs(d[~positive])) > 1e3 * tol or np.min(d[positive]) < 1e3 * tol:
        raise ArithmeticError("ambiguous null space in penalty eigen-decomposition")
    dZ, UZ = d[positive], U[:, positive]
    B = eval_bspline_basis(knots, xs)
    X = np.column_stack([np.ones_like(xs), xs])
    Z = B @ (UZ / np.sqrt(dZ)[None, :])
    return PenaltyDesign(omega=omega, X=X, Z=Z, dZ=dZ, UZ=UZ, U=U, d=d)


def rescale(x, lo=None, hi=None):
    """Affine map of ``x`` onto [0, 1]; returns the mapped values and (lo, hi)."""
    x = np.asarray(x, dtype=float)
    lo = float(np.min(x)) if lo is None else float(lo)
    hi = float(np.max(x)) if hi is None else float(hi)
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
        raise ValueError("covariate range is degenerate")
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0), (lo, hi)

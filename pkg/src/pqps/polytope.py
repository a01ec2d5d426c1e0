"""Enclosing polytope of the cubic spline moment curve.

The K + 4 vertices enclose the curve
``x -> (x, x^2, x^3, (x - g_1)_+^3, ..., (x - g_K)_+^3)`` for x in [0, 1].
Quantile values that increase with the level at every vertex give
hyperplanes that cannot cross anywhere on the curve, because every curve
point is a convex combination of the vertices.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import nnls

from .spline_basis import change_of_basis, eval_truncated_power_basis

logger = logging.getLogger(__name__)

CONDITION_WARN = 1e12
MEMBERSHIP_TOL = 1e-8


def closed_form_vertices(knots):
    """Closed-form vertices in truncated-power coordinates.

    Returns
    -------
    ndarray, shape (K + 4, K + 3)
        One vertex per row, ordered from the curve point at x = 0 to the
        curve point at x = 1.
    """
    g = knots.interior
    K = g.size
    V = np.zeros((K + 4, K + 3))
    V[1, 0] = 0.5
    V[2, :2] = (2.0 / 3.0, 1.0 / 3.0)
    for k in range(K):
        row = V[3 + k]
        row[:3] = ((2.0 + g[k]) / 3.0, (1.0 + 2.0 * g[k]) / 3.0, g[k])
        row[3:3 + k] = (g[k] - g[:k]) * (1.0 - g[:k]) ** 2
    V[K + 3, :3] = 1.0
    V[K + 3, 3:] = (1.0 - g) ** 3
    return V


def _curve_point(g, x):
    return np.concatenate([[x, x * x, x ** 3], np.maximum(x - g, 0.0) ** 3])


def _curve_tangent(g, x):
    return np.concatenate([[1.0, 2.0 * x, 3.0 * x * x], 3.0 * np.maximum(x - g, 0.0) ** 2])


def induction_vertices(knots):
    """Vertices built coordinate by coordinate from tangent lines.

    Start with the triangle enclosing (x, x^2). Each added coordinate keeps
    the earlier vertices (padded with a zero), appends the curve end point,
    and replaces the old end point by the point where the tangent line at
    the new end point meets the hyperplane on which the new coordinate is 0.
    """
    g_all = knots.interior
    verts = [np.array([0.0, 0.0]), np.array([0.5, 0.0]), np.array([1.0, 1.0])]
    extra = [None] + list(g_all)
    for step, gk in enumerate(extra):
        g = g_all[:step]
        end, tangent = _curve_point(g, 1.0), _curve_tangent(g, 1.0)
        if gk is None:
            end, tangent = end[:3], tangent[:3]
        assert end.size == verts[0].size + 1
        if tangent[-1] == 0.0:
            raise ArithmeticError("tangent line is parallel to the target hyperplane")
        t = -end[-1] / tangent[-1]
        meet = end + t * tangent
        meet[-1] = 0.0
        verts = [np.append(v, 0.0) for v in verts[:-1]] + [meet, end]
    return np.vstack(verts)


@dataclass(frozen=True)
class PolytopeVertices:
    """Vertices in truncated-power and B-spline coordinates.

    Row p of ``vertex_basis`` is the B-spline coordinate vector of vertex p,
    i.e. the affine extension of the basis evaluation map to that vertex.
    ``affine_lu`` factorises the vertices augmented with a leading column of
    ones, which is what the interpolation weights are solved against.
    """

    knots: object
    vertices_tp: np.ndarray
    vertex_basis: np.ndarray
    vertex_basis_inv: np.ndarray
    condition: float
    affine_lu: tuple = None

    @property
    def n_vertices(self):
        return self.vertices_tp.shape[0]

    @property
    def vertex_x(self):
        """First truncated-power coordinate of each vertex; lies in [0, 1]."""
        return self.vertices_tp[:, 0]


def to_bspline_coords(vertices_tp, knots):
    T = change_of_basis(knots)
    ones = np.ones((vertices_tp.shape[0], 1))
    vb = np.hstack([ones, vertices_tp]) @ T
    cond = float(np.linalg.cond(vb))
    if cond > CONDITION_WARN:
        logger.warning("vertex basis condition number %.3g exceeds %.0e", cond, CONDITION_WARN)
    return vb, np.linalg.inv(vb), cond


def build_polytope(knots):
    V = closed_form_vertices(knots)
    vb, vb_inv, cond = to_bspline_coords(V, knots)
    lu = lu_factor(np.hstack([np.ones((V.shape[0], 1)), V]))
    return PolytopeVertices(knots, V, vb, vb_inv, cond, lu)


def interpolation_weights(poly, x):
    """Affine weights M(x) expressing the curve point at x through the vertices.

    ``x`` may be scalar or an array; for an array the result has one row per
    point. Weights sum to one and are non-negative on [0, 1].

    Equal to ``bspline(x) @ vertex_basis_inv``; solving in truncated-power
    coordinates skips the change of basis and keeps the weights accurate to
    a few ulps even for K = 30.
    """
    tp = eval_truncated_power_basis(poly.knots, x)
    return lu_solve(poly.affine_lu, tp.T, trans=1).T


@dataclass(frozen=True)
class Membership:
    inside: bool
    residual: float
    weights: np.ndarray


def contains(poly, point, tol=MEMBERSHIP_TOL):
    """Convex-membership certificate for a truncated-power point via NNLS."""
    point = np.asarray(point, dtype=float)
    A = np.vstack([poly.vertices_tp.T, np.ones(poly.n_vertices)])
    b = np.append(point, 1.0)
    lam, residual = nnls(A, b)
    return Membership(bool(residual <= tol), float(residual), lam)

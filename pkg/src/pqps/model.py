"""Quantile hyperplanes over the polytope, centring mean/sd, and the posterior.

Parameter vector layout (natural scale)::

    Qp (P x T, row-major) | beta (2) | u (K + 2) | sigma2_u (1) | sigma_p (R + 4)

with P = K + 4 quantile pyramids, one per polytope vertex.
"""

import math
from collections import Counter
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.special import gammaln, ndtri

from ._normal import log_diff_ndtr, norm_logpdf
from .polytope import build_polytope, interpolation_weights
from .pyramid import build_tree, pyramid_logpdf, tree_arrays, validate_levels
from .spline_basis import KnotVector, eval_bspline_basis, make_knots, osullivan_design, rescale

BETA_PRIOR_VAR = 1e8
IG_SHAPE = 0.01
IG_SCALE = 0.01
SIGMA_P_BOUNDS = (0.01, 1e6)
RE_FAMILIES = ("normal", "cauchy")


@dataclass(frozen=True)
class ModelConfig:
    levels: tuple
    K: int = 20
    R: int = 3
    re_family: str = "normal"

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(v) for v in validate_levels(self.levels)))
        if self.re_family not in RE_FAMILIES:
            raise ValueError(f"re_family must be one of {RE_FAMILIES}")
        if self.K < 0 or self.R < 0:
            raise ValueError("knot counts must be non-negative")

    @property
    def T(self):
        return len(self.levels)

    @property
    def P(self):
        return self.K + 4

    @property
    def n_params(self):
        return self.P * self.T + 2 + (self.K + 2) + 1 + (self.R + 4)

    def slices(self):
        nq = self.P * self.T
        return {
            "Qp": slice(0, nq),
            "beta": slice(nq, nq + 2),
            "u": slice(nq + 2, nq + 2 + self.K + 2),
            "sigma2_u": slice(nq + self.K + 4, nq + self.K + 5),
            "sigma_p": slice(nq + self.K + 5, self.n_params),
        }

    def param_names(self):
        names = [f"Q[{p},{t}]" for p in range(self.P) for t in range(self.T)]
        names += ["beta0", "beta1"] + [f"u{k}" for k in range(self.K + 2)]
        names += ["sigma2_u"] + [f"sigma_p{r}" for r in range(self.R + 4)]
        return names


@dataclass
class Dataset:
    """Covariates rescaled to [0, 1]; ``x_range`` maps them back."""

    x: np.ndarray
    y: np.ndarray
    x_range: tuple = (0.0, 1.0)

    @classmethod
    def from_raw(cls, x, y, x_range=None):
        x = np.asarray(x, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        if x.shape != y.shape:
            raise ValueError("x and y must have the same length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("data contain non-finite values")
        lo, hi = (None, None) if x_range is None else x_range
        xs, rng = rescale(x, lo, hi)
        return cls(xs, y, rng)

    @property
    def n(self):
        return self.y.size

    def to_original(self, x_unit):
        lo, hi = self.x_range
        return lo + np.asarray(x_unit) * (hi - lo)


@dataclass
class ModelState:
    Qp: np.ndarray
    beta: np.ndarray
    u: np.ndarray
    sigma2_u: float
    sigma_p: np.ndarray

    def to_vector(self):
        return np.concatenate([self.Qp.ravel(), self.beta, self.u, [self.sigma2_u], self.sigma_p])

    @classmethod
    def from_vector(cls, vec, config):
        s = config.slices()
        return cls(
            Qp=np.array(vec[s["Qp"]]).reshape(config.P, config.T),
            beta=np.array(vec[s["beta"]]),
            u=np.array(vec[s["u"]]),
            sigma2_u=float(vec[s["sigma2_u"]][0]),
            sigma_p=np.array(vec[s["sigma_p"]]),
        )


@dataclass(frozen=True)
class Geometry:
    """Everything about the model that does not depend on parameters or data."""

    config: ModelConfig
    poly: object
    sd_poly: object
    tree: object
    z_map: np.ndarray
    vertex_z: np.ndarray
    vertex_sd_weights: np.ndarray
    levels: np.ndarray = field(repr=False)
    log_mass: np.ndarray = field(repr=False)

    @property
    def knots(self):
        return self.poly.knots

    def z_rows(self, x):
        return eval_bspline_basis(self.knots, x) @ self.z_map

    def quantile_weights(self, x):
        return interpolation_weights(self.poly, x)

    def sd_weights(self, x):
        return interpolation_weights(self.sd_poly, x)


def sd_knots(K, R):
    """R sd-spline knots taken from the K evenly spaced mean knots.

    Nesting puts the sd spline inside the mean spline space, so its value at
    a polytope vertex is an exact affine extension. Falls back to even
    spacing when R > K.
    """
    if R > K:
        return make_knots(R)
    picks = np.floor(np.arange(1, R + 1) * (K + 1) / (R + 1) + 0.5).astype(int)
    picks = np.clip(picks, 1, K)
    return KnotVector(np.unique(picks) / (K + 1.0))


def knot_insertion_matrix(coarse, fine, n_grid=2001):
    """E with bspline_coarse(x) = bspline_fine(x) @ E (least squares if not nested)."""
    x = np.linspace(0.0, 1.0, n_grid)
    E, *_ = np.linalg.lstsq(eval_bspline_basis(fine, x), eval_bspline_basis(coarse, x), rcond=None)
    return E


def build_geometry(config):
    knots = make_knots(config.K)
    poly = build_polytope(knots)
    sd_poly = build_polytope(sd_knots(config.K, config.R))
    design = osullivan_design(knots, np.array([0.0]))
    z_map = design.z_map
    vertex_z = poly.vertex_basis @ z_map
    E = knot_insertion_matrix(sd_poly.knots, knots)
    vertex_sd = poly.vertex_basis @ E @ sd_poly.vertex_basis_inv
    levels = np.asarray(config.levels)
    mass = np.diff(np.concatenate([[0.0], levels, [1.0]]))
    return Geometry(config, poly, sd_poly, build_tree(levels), z_map, vertex_z,
                    vertex_sd, levels, np.log(mass))


def quantile_curve(state, geom, x, t=None):
    """Q_tau(x) = sum_p Qp[p, t] M_p(x); all levels when ``t`` is None."""
    Q = geom.quantile_weights(x) @ state.Qp
    return Q if t is None else Q[..., t]


def centring_mean(state, geom, x):
    x = np.asarray(x, dtype=float)
    return state.beta[0] + state.beta[1] * x + geom.z_rows(x) @ state.u


def centring_sd(state, geom, x):
    return geom.sd_weights(x) @ state.sigma_p


def vertex_centring(state, geom):
    """Centring (mu, sd) for each of the P pyramids."""
    mu = state.beta[0] + state.beta[1] * geom.poly.vertex_x + geom.vertex_z @ state.u
    sd = geom.vertex_sd_weights @ state.sigma_p
    return mu, sd


def vertex_sd_ok(sd):
    return bool(np.all(sd > 0.0))


@numba.njit(cache=True)
def find_bin(y, q):
    """Index b with q[b-1] < y <= q[b], using q[-1] = -inf and q[T] = +inf."""
    b = 0
    while b < q.size and y > q[b]:
        b += 1
    return b


@numba.njit(cache=True)
def piecewise_normal_logpdf(y, q, log_mass, mu, sigma):
    """Log density of the piecewise Normal at ``y``.

    Bin b carries probability mass exp(log_mass[b]) and, inside the bin, the
    shape of Normal(mu, sigma) renormalised to the bin. A bin of numerically
    zero Normal mass gives -inf.
    """
    T = q.size
    b = find_bin(y, q)
    lo = -math.inf if b == 0 else (q[b - 1] - mu) / sigma
    hi = math.inf if b == T else (q[b] - mu) / sigma
    lw = log_diff_ndtr(lo, hi)
    if lw == -math.inf:
        return -math.inf
    return log_mass[b] + norm_logpdf(y, mu, sigma) - lw


def log_likelihood_point(state, geom, x, y, diagnostics=None):
    q = np.ascontiguousarray(quantile_curve(state, geom, x), dtype=float)
    mu = float(centring_mean(state, geom, x))
    sd = float(centring_sd(state, geom, x))
    value = piecewise_normal_logpdf(float(y), q, geom.log_mass, mu, sd)
    if value == -math.inf and diagnostics is not None:
        diagnostics["zero_width_bin"] += 1
    return value


def log_prior_beta(beta):
    return float(np.sum(-0.5 * beta ** 2 / BETA_PRIOR_VAR - 0.5 * math.log(2 * math.pi * BETA_PRIOR_VAR)))


def log_prior_u(u, sigma2_u, family):
    if not sigma2_u > 0:
        return -math.inf
    if family == "normal":
        return float(np.sum(-0.5 * u ** 2 / sigma2_u) - 0.5 * u.size * math.log(2 * math.pi * sigma2_u))
    s = math.sqrt(sigma2_u)
    return float(-np.sum(np.log1p((u / s) ** 2)) - u.size * math.log(math.pi * s))


def log_prior_sigma2_u(s2):
    if not s2 > 0:
        return -math.inf
    return IG_SHAPE * math.log(IG_SCALE) - gammaln(IG_SHAPE) - (IG_SHAPE + 1) * math.log(s2) - IG_SCALE / s2


def log_prior_sigma_p(sigma_p):
    lo, hi = SIGMA_P_BOUNDS
    if np.any(sigma_p < lo) or np.any(sigma_p > hi):
        return -math.inf
    return -sigma_p.size * math.log(hi - lo)


def log_prior_quantiles(state, geom):
    mu, sd = vertex_centring(state, geom)
    t = geom.tree
    total = 0.0
    for p in range(geom.config.P):
        total += pyramid_logpdf(np.ascontiguousarray(state.Qp[p]), mu[p], sd[p], *tree_arrays(t))
    return total


def log_posterior(state, data, geom, diagnostics=None):
    """Unnormalised log posterior; -inf outside the parameter support."""
    if np.any(np.diff(state.Qp, axis=1) <= 0):
        return -math.inf
    lp = (log_prior_sigma_p(state.sigma_p) + log_prior_sigma2_u(state.sigma2_u)
          + log_prior_beta(state.beta)
          + log_prior_u(state.u, state.sigma2_u, geom.config.re_family))
    if lp == -math.inf:
        return lp
    if not vertex_sd_ok(vertex_centring(state, geom)[1]):
        return -math.inf
    lp += log_prior_quantiles(state, geom)
    if data is None or data.n == 0:
        return lp
    Q = np.ascontiguousarray(quantile_curve(state, geom, data.x))
    mu = centring_mean(state, geom, data.x)
    sd = centring_sd(state, geom, data.x)
    for i in range(data.n):
        li = piecewise_normal_logpdf(data.y[i], Q[i], geom.log_mass, mu[i], sd[i])
        if li == -math.inf:
            if diagnostics is not None:
                diagnostics["zero_width_bin"] += 1
            return -math.inf
        lp += li
    return lp


def initial_state(data, geom):
    """Normal-consistent starting point with a finite posterior.

    The centring line comes from least squares of y on [1, x]; every pyramid
    starts at the Normal quantiles of that line (evaluated at the vertex) with
    the residual sd.
    """
    cfg = geom.config
    if data is not None and data.n >= 2:
        X = np.column_stack([np.ones(data.n), data.x])
        beta, *_ = np.linalg.lstsq(X, data.y, rcond=None)
        resid = data.y - X @ beta
        sd = float(np.std(resid, ddof=min(2, data.n - 1))) if data.n > 2 else float(np.std(data.y))
    else:
        beta, sd = np.zeros(2), 1.0
    sd = float(np.clip(sd if sd > 0 else 1.0, SIGMA_P_BOUNDS[0] * 10, SIGMA_P_BOUNDS[1] / 10))
    z = ndtri(geom.levels)
    centre = beta[0] + beta[1] * geom.poly.vertex_x
    Qp = centre[:, None] + sd * z[None, :]
    return ModelState(Qp=Qp, beta=np.asarray(beta, dtype=float), u=np.zeros(cfg.K + 2),
                      sigma2_u=1.0, sigma_p=np.full(cfg.R + 4, sd))


def new_diagnostics():
    return Counter()

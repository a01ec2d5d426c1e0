"""Quantile pyramid prior on a finite set of quantile levels.

Levels are drawn in a tree: the middle level first, then the middle of each
remaining side, and so on. Each new uniform-scale quantile is a Beta-weighted
average of its two nearest already-drawn neighbours, with virtual neighbours
0 and 1 at the ends. A Normal centring maps the uniform-scale pyramid to
the real line through the inverse CDF.
"""

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import betaln, ndtri

from ._normal import LOG_SQRT_2PI, log_diff_ndtr


@dataclass(frozen=True)
class PyramidTree:
    """Sampling order and Beta parameters for T quantile levels.

    Node arrays are in sampling order (every node after its ancestors).
    ``left``/``right`` index the level list, with -1 and T standing for the
    virtual levels 0 and 1. ``parent`` is the node index of the parent (-1
    at the root) and ``side`` is 0 for a left child, 1 for a right child.
    """

    levels: np.ndarray
    level_index: np.ndarray
    depth: np.ndarray
    left: np.ndarray
    right: np.ndarray
    beta_a: np.ndarray
    beta_b: np.ndarray
    log_beta_fn: np.ndarray
    parent: np.ndarray = None
    side: np.ndarray = None

    @property
    def T(self):
        return self.levels.size

    @property
    def ancestor_levels(self):
        ext = np.concatenate([[0.0], self.levels, [1.0]])
        return ext[self.left + 1], ext[self.right + 1]

    def expected_split(self):
        lo, hi = self.ancestor_levels
        return (self.levels[self.level_index] - lo) / (hi - lo)


def validate_levels(levels):
    levels = np.asarray(levels, dtype=float).reshape(-1)
    if levels.size == 0:
        raise ValueError("at least one quantile level is required")
    if not np.all(np.isfinite(levels)) or levels[0] <= 0.0 or levels[-1] >= 1.0:
        raise ValueError("quantile levels must lie strictly inside (0, 1)")
    if np.any(np.diff(levels) <= 0.0):
        raise ValueError("quantile levels must be strictly increasing")
    return levels


def build_tree(levels):
    levels = validate_levels(levels)
    T = levels.size
    nodes = []
    queue = [(0, T, -1, T, 1, -1, 0)]
    # breadth-first, so the node list is also a valid sampling order
    while queue:
        lo, hi, left, right, m, parent, side = queue.pop(0)
        if lo >= hi:
            continue
        mid = lo + (hi - lo - 1) // 2
        node = len(nodes)
        nodes.append((mid, m, left, right, parent, side))
        queue.append((lo, mid, left, mid, m + 1, node, 0))
        queue.append((mid + 1, hi, mid, right, m + 1, node, 1))
    idx, depth, left, right, parent, side = (np.array(col, dtype=np.int64) for col in zip(*nodes))
    ext = np.concatenate([[0.0], levels, [1.0]])
    e = (levels[idx] - ext[left + 1]) / (ext[right + 1] - ext[left + 1])
    a = 2.0 * depth
    b = a * (1.0 - e) / e
    return PyramidTree(levels, idx, depth, left, right, a, b, betaln(a, b), parent, side)


def uniform_quantiles(tree, splits):
    """Uniform-scale quantiles from per-node split weights (sampling order)."""
    u = np.empty(tree.T)
    ext = lambda j: 0.0 if j < 0 else (1.0 if j >= tree.T else u[j])
    for n, t in enumerate(tree.level_index):
        v = splits[n]
        u[t] = ext(tree.left[n]) * (1.0 - v) + ext(tree.right[n]) * v
    return u


def sample_pyramid(tree, centring, rng, size=None):
    """Draw pyramid quantiles centred on Normal(mu, sigma).

    Returns an array of shape (T,) or (size, T).
    """
    mu, sigma = centring
    if not sigma > 0:
        raise ValueError("centring sd must be positive")
    n = 1 if size is None else int(size)
    splits = rng.beta(tree.beta_a, tree.beta_b, size=(n, tree.beta_a.size))
    u = np.vstack([uniform_quantiles(tree, s) for s in splits])
    q = mu + sigma * ndtri(u)
    return q[0] if size is None else q


@numba.njit(cache=True)
def pyramid_logpdf_into(q, mu, sigma, level_index, left, right, beta_a, beta_b, log_beta_fn,
                        parent, side, z, piece):
    """:func:`pyramid_logpdf` with caller-owned scratch ``z`` (T,) and ``piece`` (T, 2)."""
    T = q.size
    total = -T * (LOG_SQRT_2PI + math.log(sigma))
    for t in range(T):
        if t > 0 and not q[t] > q[t - 1]:
            return -math.inf
        z[t] = (q[t] - mu) / sigma
        total -= 0.5 * z[t] * z[t]
    # piece[n] holds the log centring mass left/right of node n inside its
    # ancestor interval; a child's interval is one of its parent's pieces
    for n in range(level_index.size):
        zt = z[level_index[n]]
        zl = -math.inf if left[n] < 0 else z[left[n]]
        zr = math.inf if right[n] >= T else z[right[n]]
        lw = 0.0 if parent[n] < 0 else piece[parent[n], side[n]]
        piece[n, 0] = log_diff_ndtr(zl, zt)
        piece[n, 1] = log_diff_ndtr(zt, zr)
        lv = piece[n, 0] - lw
        l1v = piece[n, 1] - lw
        total += (beta_a[n] - 1.0) * lv + (beta_b[n] - 1.0) * l1v - log_beta_fn[n] - lw
    if math.isnan(total):
        return -math.inf
    return total


@numba.njit(cache=True)
def pyramid_logpdf(q, mu, sigma, level_index, left, right, beta_a, beta_b, log_beta_fn,
                   parent, side):
    """Joint log density of pyramid quantiles ``q`` under Normal(mu, sigma) centring."""
    T = q.size
    return pyramid_logpdf_into(q, mu, sigma, level_index, left, right, beta_a, beta_b,
                               log_beta_fn, parent, side, np.empty(T), np.empty((T, 2)))


def log_prior(tree, q, centring=(0.0, 1.0)):
    """Log joint density of quantiles ``q``; -inf off the monotone support."""
    mu, sigma = centring
    q = np.ascontiguousarray(q, dtype=float)
    if q.shape != (tree.T,):
        raise ValueError(f"expected {tree.T} quantiles, got shape {q.shape}")
    return pyramid_logpdf(q, float(mu), float(sigma), *tree_arrays(tree))


def tree_arrays(tree):
    return (tree.level_index, tree.left, tree.right, tree.beta_a, tree.beta_b, tree.log_beta_fn,
            tree.parent, tree.side)

"""Compiled Metropolis-Hastings kernels over the PQPS posterior.

The chain works on an internal vector that differs from the natural one in
three places: sigma2_u is replaced by l = log(sigma2_u), the random
effects are stored non-centred, u = exp(l / 2) v, and the sd coefficients
sigma_p are stored on the log scale. With the Jacobian of that
map the prior of v is standard Normal (or standard Cauchy) whatever
sigma2_u is, and the log-Jacobian of the log transform is part of the
target. Cached linear predictors make a proposal cost proportional to
what it touches:

    cur = (Qx, mux, sdx, muv, sdv, ll, bins, lpyr, lpo)

Qx/mux/sdx are quantile curves, centring mean and sd at the data points;
muv/sdv the centring at the polytope vertices; ll and bins the per-point log
likelihood and bin index; lpyr the per-pyramid log prior; lpo the remaining
prior terms (beta, v, log sigma2_u and log sigma_p with Jacobians).
"""

import math

import numba
import numpy as np

from ._normal import log_diff_ndtr, norm_logpdf
from .model import BETA_PRIOR_VAR, IG_SCALE, IG_SHAPE, SIGMA_P_BOUNDS, find_bin
from .pyramid import pyramid_logpdf_into

OK, OFF_SUPPORT, ZERO_WIDTH = 0, 1, 2

_LOG_2PI = math.log(2.0 * math.pi)
_IG_CONST = IG_SHAPE * math.log(IG_SCALE) - math.lgamma(IG_SHAPE)
_SIG_LO, _SIG_HI = SIGMA_P_BOUNDS
_LOG_SIG_RANGE = math.log(_SIG_HI - _SIG_LO)


@numba.njit(cache=True)
def rm_step(log_scale, count, accepted, target, c):
    """One Robbins-Monro update of a log proposal scale with 1/k decay."""
    k = max(1.0, float(count))
    if accepted:
        return log_scale + c * (1.0 - target) / k
    return log_scale - c * target / k


@numba.njit(cache=True)
def _adapt(log_scale, counts, anchor, j, accepted, target, c, restart, n0):
    """Robbins-Monro step for coordinate/block ``j`` with search restarts.

    When the scale has moved by more than ``restart`` (log units) from the
    start of the current search, a new search begins there with the
    counter reset to ``n0``.
    """
    log_scale[j] = rm_step(log_scale[j], counts[j], accepted, target, c)
    counts[j] += 1
    if abs(log_scale[j] - anchor[j]) > restart:
        anchor[j] = log_scale[j]
        counts[j] = n0


@numba.njit(cache=True)
def _lp_beta(b0, b1):
    return -0.5 * (b0 * b0 + b1 * b1) / BETA_PRIOR_VAR - math.log(2.0 * math.pi * BETA_PRIOR_VAR)


@numba.njit(cache=True)
def _lp_v(theta, ou, K2, family):
    # standardised random effects: N(0, 1) or Cauchy(0, 1) components
    total = 0.0
    if family == 0:
        for k in range(K2):
            total += theta[ou + k] ** 2
        return -0.5 * total - 0.5 * K2 * _LOG_2PI
    for k in range(K2):
        total -= math.log1p(theta[ou + k] ** 2)
    return total - K2 * math.log(math.pi)


@numba.njit(cache=True)
def _lp_log_s2(log_s2):
    # inverse-gamma density of sigma2_u plus the log-Jacobian of the log transform
    return _IG_CONST - IG_SHAPE * log_s2 - IG_SCALE * math.exp(-log_s2)


@numba.njit(cache=True)
def _lp_sigma_p(theta, osig, R4):
    # uniform density of each sigma_p plus the log-Jacobian of the log transform
    total = -R4 * _LOG_SIG_RANGE
    for r in range(R4):
        v = math.exp(theta[osig + r])
        if not (v >= _SIG_LO and v <= _SIG_HI):
            return -math.inf
        total += theta[osig + r]
    return total


@numba.njit(cache=True)
def _pw_at_bin(y, q, b, log_mass, mu, sd):
    T = q.size
    lo = -math.inf if b == 0 else (q[b - 1] - mu) / sd
    hi = math.inf if b == T else (q[b] - mu) / sd
    lw = log_diff_ndtr(lo, hi)
    if lw == -math.inf:
        return -math.inf
    return log_mass[b] + norm_logpdf(y, mu, sd) - lw


@numba.njit(cache=True)
def evaluate(theta, G, dims, cur):
    """Fill every cache from scratch; returns (total, status)."""
    y, M, xcov, Zx, Nx, vx, Zv, Nv, log_mass, li, le, ri, ba, bb, lb, par, side, _ = G
    P, T, K2, R4, family = dims
    Qx, mux, sdx, muv, sdv, ll, bins, lpyr, lpo = cur
    nQ = P * T
    ob, ou = nQ, nQ + 2
    os2 = ou + K2
    osig = os2 + 1
    n = y.size
    zbuf, piece = np.empty(T), np.empty((T, 2))
    for p in range(P):
        for t in range(1, T):
            if not theta[p * T + t] > theta[p * T + t - 1]:
                return -math.inf, OFF_SUPPORT
    lpo[0] = _lp_beta(theta[ob], theta[ob + 1])
    lpo[1] = _lp_v(theta, ou, K2, family)
    lpo[2] = _lp_log_s2(theta[os2])
    lpo[3] = _lp_sigma_p(theta, osig, R4)
    if lpo[3] == -math.inf:
        return -math.inf, OFF_SUPPORT
    su = math.exp(0.5 * theta[os2])
    for p in range(P):
        m = theta[ob] + theta[ob + 1] * vx[p]
        for k in range(K2):
            m += Zv[p, k] * su * theta[ou + k]
        s = 0.0
        for r in range(R4):
            s += Nv[p, r] * math.exp(theta[osig + r])
        muv[p] = m
        sdv[p] = s
        if not s > 0.0:
            return -math.inf, OFF_SUPPORT
        lpyr[p] = pyramid_logpdf_into(theta[p * T:(p + 1) * T], m, s, li, le, ri, ba, bb, lb, par,
                                       side, zbuf, piece)
    for i in range(n):
        for t in range(T):
            acc = 0.0
            for p in range(P):
                acc += M[i, p] * theta[p * T + t]
            Qx[i, t] = acc
        m = theta[ob] + theta[ob + 1] * xcov[i]
        for k in range(K2):
            m += Zx[i, k] * su * theta[ou + k]
        s = 0.0
        for r in range(R4):
            s += Nx[i, r] * math.exp(theta[osig + r])
        mux[i] = m
        sdx[i] = s
        b = find_bin(y[i], Qx[i])
        bins[i] = b
        ll[i] = _pw_at_bin(y[i], Qx[i], b, log_mass, m, s)
        if ll[i] == -math.inf:
            return -math.inf, ZERO_WIDTH
    return ll.sum() + lpyr.sum() + lpo.sum(), OK


@numba.njit(cache=True)
def _copy_caches(src, dst):
    # explicit loops: much cheaper than slice assignment for these tiny arrays
    a, b = src[0], dst[0]
    for i in range(a.shape[0]):
        for t in range(a.shape[1]):
            b[i, t] = a[i, t]
    _copy1(src[1], dst[1])
    _copy1(src[2], dst[2])
    _copy1(src[3], dst[3])
    _copy1(src[4], dst[4])
    _copy1(src[5], dst[5])
    _copy1(src[6], dst[6])
    _copy1(src[7], dst[7])
    _copy1(src[8], dst[8])


@numba.njit(cache=True)
def _copy1(a, b):
    for i in range(a.size):
        b[i] = a[i]


@numba.njit(cache=True)
def propose(theta, theta_new, idx, delta, G, dims, cur, prop):
    """Evaluate theta + delta on ``idx`` into ``prop``; returns (total, status).

    ``cur`` must hold the caches for ``theta``.
    """
    y, M, xcov, Zx, Nx, vx, Zv, Nv, log_mass, li, le, ri, ba, bb, lb, par, side, _ = G
    P, T, K2, R4, family = dims
    Qx2, mux2, sdx2, muv2, sdv2, ll2, bins2, lpyr2, lpo2 = prop
    bins = cur[6]
    nQ = P * T
    ob, ou = nQ, nQ + 2
    os2 = ou + K2
    osig = os2 + 1
    n = y.size
    zbuf, piece = np.empty(T), np.empty((T, 2))

    _copy_caches(cur, prop)
    theta_new[:] = theta
    colchg = np.zeros(T + 1, dtype=np.bool_)
    rowchg = np.zeros(P, dtype=np.bool_)
    beta_chg = u_chg = s2_chg = sd_chg = False
    for k in range(idx.size):
        j = idx[k]
        d = delta[k]
        theta_new[j] += d
        if j < nQ:
            p = j // T
            t = j - p * T
            colchg[t] = True
            rowchg[p] = True
            for i in range(n):
                Qx2[i, t] += d * M[i, p]
        elif j < ou:
            beta_chg = True
            if j == ob:
                for i in range(n):
                    mux2[i] += d
                for p in range(P):
                    muv2[p] += d
            else:
                for i in range(n):
                    mux2[i] += d * xcov[i]
                for p in range(P):
                    muv2[p] += d * vx[p]
        elif j < os2:
            u_chg = True
        elif j == os2:
            s2_chg = True
        else:
            sd_chg = True
            r = j - osig
            ds = math.exp(theta_new[j]) - math.exp(theta_new[j] - d)
            for i in range(n):
                sdx2[i] += ds * Nx[i, r]
            for p in range(P):
                sdv2[p] += ds * Nv[p, r]

    for p in range(P):
        if rowchg[p]:
            for t in range(1, T):
                if not theta_new[p * T + t] > theta_new[p * T + t - 1]:
                    return -math.inf, OFF_SUPPORT
    if sd_chg:
        lpo2[3] = _lp_sigma_p(theta_new, osig, R4)
        if lpo2[3] == -math.inf:
            return -math.inf, OFF_SUPPORT
        for p in range(P):
            if not sdv2[p] > 0.0:
                return -math.inf, OFF_SUPPORT
    if u_chg or s2_chg:
        # shift the centring mean by Z (u_new - u_old)
        su0 = math.exp(0.5 * theta[os2])
        su1 = math.exp(0.5 * theta_new[os2])
        du = np.empty(K2)
        for c in range(K2):
            du[c] = su1 * theta_new[ou + c] - su0 * theta[ou + c]
        for i in range(n):
            acc = 0.0
            for c in range(K2):
                acc += Zx[i, c] * du[c]
            mux2[i] += acc
        for p in range(P):
            acc = 0.0
            for c in range(K2):
                acc += Zv[p, c] * du[c]
            muv2[p] += acc
    if beta_chg:
        lpo2[0] = _lp_beta(theta_new[ob], theta_new[ob + 1])
    if u_chg:
        lpo2[1] = _lp_v(theta_new, ou, K2, family)
    if s2_chg:
        lpo2[2] = _lp_log_s2(theta_new[os2])

    centring_chg = beta_chg or u_chg or s2_chg or sd_chg
    for p in range(P):
        if centring_chg or rowchg[p]:
            lpyr2[p] = pyramid_logpdf_into(theta_new[p * T:(p + 1) * T], muv2[p], sdv2[p],
                                           li, le, ri, ba, bb, lb, par, side, zbuf, piece)
    any_col = False
    for t in range(T):
        any_col = any_col or colchg[t]
    if centring_chg or any_col:
        for i in range(n):
            b = bins[i]
            # a point keeps its bin unless one of the bin's bounds moved
            if centring_chg or colchg[b] or (b > 0 and colchg[b - 1]):
                if centring_chg and not (colchg[b] or (b > 0 and colchg[b - 1])):
                    nb = b
                else:
                    nb = find_bin(y[i], Qx2[i])
                bins2[i] = nb
                v = _pw_at_bin(y[i], Qx2[i], nb, log_mass, mux2[i], sdx2[i])
                if v == -math.inf:
                    return -math.inf, ZERO_WIDTH
                ll2[i] = v
    return ll2.sum() + lpyr2.sum() + lpo2.sum(), OK


@numba.njit(cache=True)
def step_factor(j, theta, G, dims, cur):
    """State-dependent multiplier of the single-site step for coordinate ``j``.

    Vertex quantiles step by an approximate conditional sd combining the
    centring sd at the vertex, the gap between the two neighbouring
    quantiles (for the lowest and highest level, the gap between the next
    two levels inward) and the data information phi(z_t)^2 / (tau (1 - tau)) per unit
    of squared interpolation weight over sd(x_i)^2 (``G[17]``). The
    mean coordinates (beta, v) step by an approximate conditional sd,
    1 / sqrt(prior precision + T sum_p (d mu_p / d theta_j)^2 / sd_p^2),
    treating each pyramid as T Normal observations of its centring mean.
    Neither depends on coordinate ``j`` itself, so the proposal remains
    symmetric. Other coordinates use a factor of one.
    """
    vx, Zv = G[5], G[6]
    sdv = cur[4]
    P, T, K2 = dims[0], dims[1], dims[2]
    nQ = P * T
    ob, ou = nQ, nQ + 2
    if j < nQ:
        p = j // T
        t = j - p * T
        M, sdx, qinfo = G[1], cur[2], G[17]
        prec = 1.0 / (sdv[p] * sdv[p])
        gap = 0.0
        if 0 < t < T - 1:
            gap = theta[j + 1] - theta[j - 1]
        elif T >= 3:
            # end levels: the gap between the two nearest other levels
            gap = theta[j + 2] - theta[j + 1] if t == 0 else theta[j - 1] - theta[j - 2]
        if gap > 0.0:
            prec += 1.0 / (gap * gap)
        for i in range(sdx.size):
            prec += qinfo[t] * M[i, p] * M[i, p] / (sdx[i] * sdx[i])
        return 1.0 / math.sqrt(prec)
    if j >= ou + K2:
        return 1.0
    if j < ou:
        prec = 1.0 / BETA_PRIOR_VAR
        for p in range(P):
            g = 1.0 if j == ob else vx[p]
            prec += T * g * g / (sdv[p] * sdv[p])
    else:
        k = j - ou
        s2u = math.exp(theta[ou + K2])
        prec = 1.0
        for p in range(P):
            prec += T * s2u * Zv[p, k] * Zv[p, k] / (sdv[p] * sdv[p])
    return 1.0 / math.sqrt(prec)


@numba.njit(cache=True)
def carry_pass(theta, theta_new, G, dims, cur, prop, total, carry, log_scale, counts, anchor,
               accepts, tries, target, c, restart, n0, adapt, steps, log_u, idx, delta):
    """One move per centring coordinate in ``carry`` that takes the quantiles along.

    Coordinate j (beta, v, log sigma2_u with v held fixed, or log sigma_p)
    moves by exp(log_scale[k]) times a
    standard Normal draw, and every affected vertex row is mapped by
    Q -> mu' + (sd' / sd) (Q - mu), so the standardised quantiles
    (Q - mu) / sd stay fixed. The map is invertible with log-Jacobian
    T sum_p log(sd'_p / sd_p), which enters the acceptance ratio. This
    complements the single-coordinate moves, which hold Q fixed and are
    hemmed in whenever the pyramids pin the centring down.
    ``idx``/``delta`` are work buffers of length P T + 1.
    """
    vx, Zv, Nv = G[5], G[6], G[7]
    muv, sdv = cur[3], cur[4]
    P, T, K2 = dims[0], dims[1], dims[2]
    nQ = P * T
    ob, ou = nQ, nQ + 2
    os2 = ou + K2
    osig = os2 + 1
    zero_width = 0
    for k in range(carry.size):
        j = carry[k]
        d = math.exp(log_scale[k]) * steps[k]
        dmu = 0.0
        ds = 0.0
        dsu = 0.0
        if j >= osig:
            ds = math.exp(theta[j] + d) - math.exp(theta[j])
        elif j == os2:
            dsu = math.exp(0.5 * (theta[j] + d)) - math.exp(0.5 * theta[j])
        idx[0] = j
        delta[0] = d
        m = 1
        log_jac = 0.0
        status = OK
        for p in range(P):
            if j == ob:
                dmu = d
            elif j == ob + 1:
                dmu = d * vx[p]
            elif j < os2:
                dmu = d * math.exp(0.5 * theta[os2]) * Zv[p, j - ou]
            elif j == os2:
                # v fixed: u = exp(l / 2) v scales with sigma_u
                dmu = 0.0
                for kk in range(K2):
                    dmu += Zv[p, kk] * theta[ou + kk]
                dmu *= dsu
            else:
                dmu = 0.0
            dsp = ds * Nv[p, j - osig] if j >= osig else 0.0
            if dmu == 0.0 and dsp == 0.0:
                continue
            s1 = sdv[p] + dsp
            if not s1 > 0.0:
                status = OFF_SUPPORT
                break
            ratio = s1 / sdv[p]
            log_jac += T * math.log(ratio)
            for t in range(T):
                q = theta[p * T + t]
                idx[m] = p * T + t
                delta[m] = dmu + (ratio - 1.0) * (q - muv[p])
                m += 1
        new_total = -math.inf
        if status == OK:
            new_total, status = propose(theta, theta_new, idx[:m], delta[:m], G, dims, cur, prop)
        if status == ZERO_WIDTH:
            zero_width += 1
        ok = status == OK and log_u[k] < new_total - total + log_jac
        if ok:
            for r in range(m):
                theta[idx[r]] = theta_new[idx[r]]
            _copy_caches(prop, cur)
            total = new_total
            accepts[k] += 1
        tries[k] += 1
        if adapt:
            _adapt(log_scale, counts, anchor, k, ok, target, c, restart, n0)
    return total, zero_width


@numba.njit(cache=True)
def single_site_chunk(theta, theta_new, G, dims, cur, prop, total, active,
                      log_scale, counts, anchor, accepts, tries, target, c, restart, n0, adapt,
                      steps, log_u, out, store_from, carry, carry_state, carry_steps, carry_u):
    """Sweep every active coordinate once per row of ``steps``.

    ``steps`` holds standard normals (or U(-1, 1) draws for coordinates with
    uniform proposals); the proposal is exp(log_scale) times that draw times
    :func:`step_factor`. The log sigma2_u coordinate is moved with the random
    effects u held fixed (v rescaled), which keeps its conditional spread
    stable however strongly the data pin u down.
    After each sweep, :func:`carry_pass` runs over the coordinates in
    ``carry`` with ``carry_state = (log_scale, counts, anchor, accepts,
    tries)`` and its own draws ``carry_steps``/``carry_u``.
    Returns the updated log posterior and the number of zero-width rejections.
    """
    K2 = dims[2]
    cidx = np.empty(dims[0] * dims[1] + 1, dtype=np.int64)
    cdelta = np.empty(dims[0] * dims[1] + 1)
    cls, ccounts, canchor, cacc, ctries = carry_state
    ou = dims[0] * dims[1] + 2
    os2 = ou + K2
    idx = np.empty(1, dtype=np.int64)
    delta = np.empty(1)
    # log sigma2_u moves with u = exp(l / 2) v held fixed, i.e. v rescaled
    idx_s2 = np.empty(K2 + 1, dtype=np.int64)
    delta_s2 = np.empty(K2 + 1)
    idx_s2[0] = os2
    for k in range(K2):
        idx_s2[k + 1] = ou + k
    zero_width = 0
    for it in range(steps.shape[0]):
        for a in range(active.size):
            j = active[a]
            d = math.exp(log_scale[j]) * steps[it, j] * step_factor(j, theta, G, dims, cur)
            if j == os2:
                delta_s2[0] = d
                shrink = math.exp(-0.5 * d) - 1.0
                for k in range(K2):
                    delta_s2[k + 1] = theta[ou + k] * shrink
                new_total, status = propose(theta, theta_new, idx_s2, delta_s2, G, dims, cur, prop)
                # Jacobian of the v rescaling
                log_ratio = new_total - total - 0.5 * K2 * d
            else:
                idx[0] = j
                delta[0] = d
                new_total, status = propose(theta, theta_new, idx, delta, G, dims, cur, prop)
                log_ratio = new_total - total
            if status == ZERO_WIDTH:
                zero_width += 1
            ok = status == OK and log_u[it, j] < log_ratio
            if ok:
                theta[:] = theta_new
                _copy_caches(prop, cur)
                total = new_total
                accepts[j] += 1
            tries[j] += 1
            if adapt:
                _adapt(log_scale, counts, anchor, j, ok, target, c, restart, n0)
        total, zw = carry_pass(theta, theta_new, G, dims, cur, prop, total, carry, cls, ccounts,
                               canchor, cacc, ctries, target, c, restart, n0, adapt,
                               carry_steps[it], carry_u[it], cidx, cdelta)
        zero_width += zw
        if it >= store_from:
            out[it - store_from, :] = theta
    return total, zero_width


@numba.njit(cache=True)
def block_chunk(theta, theta_new, G, dims, cur, prop, total, block_idx, block_len, chol,
                base, local, lag, gscale, log_scale, counts, anchor, accepts, tries, target, c, restart, n0,
                adapt, z, log_u, out, it0, burn, thin, carry, carry_state, carry_steps, carry_u,
                carry_target, carry_c, carry_n0):
    """One multivariate Normal block update per block per iteration.

    Without ``local`` a block moves by exp(log_scale) chol z. With ``local``
    each coordinate's row is further multiplied by ``base[j]`` times its
    :func:`step_factor` at the current state; since those factors may depend
    on coordinates inside the block, the move carries the Hastings ratio of
    the position-dependent proposal. In that mode a block containing
    log sigma2_u also rescales every random effect outside the block so its
    u stays fixed, as in the single-site move. ``c`` holds one Robbins-Monro
    step constant per block.

    Also in ``local`` mode, a vertex quantile whose lower neighbour in the
    same row sits at block position ``lag[b, r] >= 0`` moves on the log of
    that gap, by exp(log_scale) ``gscale[b, r]`` times its Cholesky row. The
    new quantile is the neighbour's new value plus the rescaled gap, so the
    row stays ordered inside the block; the ratio gains the Jacobian
    sum log(gap' / gap). Block members must be in increasing index order.

    Each iteration ends with a :func:`carry_pass` (see
    :func:`single_site_chunk`), tuned towards ``carry_target`` while ``adapt``.

    Draws are stored every ``thin`` iterations once the global iteration
    counter (starting at ``it0``) reaches ``burn``.
    """
    cidx = np.empty(dims[0] * dims[1] + 1, dtype=np.int64)
    cdelta = np.empty(dims[0] * dims[1] + 1)
    cls, ccounts, canchor, cacc, ctries = carry_state
    nb = block_len.size
    bmax = chol.shape[1]
    K2 = dims[2]
    ou = dims[0] * dims[1] + 2
    os2 = ou + K2
    zero_width = 0
    # room for the block plus the random effects rescaled by a log sigma2_u move
    idx_full = np.zeros(bmax + K2, dtype=np.int64)
    delta = np.zeros(bmax + K2)
    a0 = np.ones(bmax)
    zr = np.zeros(bmax)
    deta = np.zeros(bmax)
    for it in range(z.shape[0]):
        for bidx in range(nb):
            d = block_len[bidx]
            s = math.exp(log_scale[bidx])
            log_hastings = 0.0
            s2_pos = -1
            for r in range(d):
                idx_full[r] = block_idx[bidx, r]
                if idx_full[r] == os2:
                    s2_pos = r
                a0[r] = s
                if local:
                    if lag[bidx, r] >= 0:
                        a0[r] *= gscale[bidx, r]
                    else:
                        a0[r] *= base[idx_full[r]] * step_factor(idx_full[r], theta, G, dims, cur)
            for r in range(d):
                acc = 0.0
                for q in range(r + 1):
                    acc += chol[bidx, r, q] * z[it, bidx, q]
                deta[r] = a0[r] * acc
                if local and lag[bidx, r] >= 0:
                    below = idx_full[lag[bidx, r]]
                    gap = theta[idx_full[r]] - theta[below]
                    delta[r] = theta[below] + delta[lag[bidx, r]] + gap * math.exp(deta[r]) \
                        - theta[idx_full[r]]
                    log_hastings += deta[r]
                else:
                    delta[r] = deta[r]
            m = d
            if local and s2_pos >= 0:
                # random effects outside the block keep u fixed (v rescaled)
                shrink = math.exp(-0.5 * delta[s2_pos]) - 1.0
                for k in range(K2):
                    inside = False
                    for r in range(d):
                        inside = inside or idx_full[r] == ou + k
                    if not inside:
                        idx_full[m] = ou + k
                        delta[m] = theta[ou + k] * shrink
                        m += 1
                log_hastings -= 0.5 * (m - d) * delta[s2_pos]
            new_total, status = propose(theta, theta_new, idx_full[:m], delta[:m], G, dims, cur, prop)
            if status == ZERO_WIDTH:
                zero_width += 1
            if status == OK and local:
                # reverse draw: chol z' = (theta - theta_new) / a(theta_new)
                for r in range(d):
                    if lag[bidx, r] >= 0:
                        a1 = a0[r]
                    else:
                        a1 = s * base[idx_full[r]] * step_factor(idx_full[r], theta_new, G, dims, prop)
                    acc = -deta[r] / a1
                    for q in range(r):
                        acc -= chol[bidx, r, q] * zr[q]
                    zr[r] = acc / chol[bidx, r, r]
                    log_hastings += math.log(a0[r] / a1) - 0.5 * zr[r] * zr[r] \
                        + 0.5 * z[it, bidx, r] * z[it, bidx, r]
            ok = status == OK and log_u[it, bidx] < new_total - total + log_hastings
            if ok:
                for r in range(m):
                    theta[idx_full[r]] = theta_new[idx_full[r]]
                _copy_caches(prop, cur)
                total = new_total
                accepts[bidx] += 1
            tries[bidx] += 1
            if adapt:
                _adapt(log_scale, counts, anchor, bidx, ok, target, c[bidx], restart, n0)
        total, zw = carry_pass(theta, theta_new, G, dims, cur, prop, total, carry, cls, ccounts,
                               canchor, cacc, ctries, carry_target, carry_c, restart,
                               carry_n0, adapt, carry_steps[it], carry_u[it], cidx, cdelta)
        zero_width += zw
        g = it0 + it
        if g >= burn and (g - burn + 1) % thin == 0:
            out[(g - burn) // thin, :] = theta
    return total, zero_width

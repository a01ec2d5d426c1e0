"""Two-stage adaptive MCMC for the PQPS posterior.

Stage 1 runs single-site Metropolised Gibbs sweeps whose per-parameter
scales are tuned by Robbins-Monro towards 0.44 acceptance. Its retained
draws give a posterior correlation matrix; complete-linkage clustering on
1 - |rho| groups parameters into blocks. Stage 2 updates blocks with
multivariate Normal proposals, tuned towards 0.23 during burn-in and frozen
afterwards.

Three additions keep the chain mixing on this strongly hierarchical target.
Block proposals take their coordinate scales from the tuned stage-1 steps
at the current state, with the matching Hastings correction, and only the
shape from the stage-1 correlation. Vertex quantiles whose lower neighbour
shares their block step on the log of that gap, so the step follows the
local spacing of the pyramid. After every sweep or block pass, each
centring coordinate also gets a move that carries the vertex quantiles
along with it, alternating between the two parameterisations of the
pyramids (fixed quantiles, fixed standardised quantiles).

Internally sigma2_u and sigma_p are sampled on the log scale and the random
effects in non-centred form v = u / sigma_u; every array handed back to
callers is on the natural scale unless its name says ``internal``.
"""

import logging
import math
import sys
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from scipy.special import ndtri

from . import _kernel
from .model import ModelState, initial_state
from .pyramid import tree_arrays

logger = logging.getLogger(__name__)

TARGET_SINGLE = 0.44
TARGET_BLOCK = 0.23
BLOCK_MAX = 8
RIDGE = 1e-8
MIN_CORRELATION_SAMPLES = 500
RESTART_FACTOR = 3.0


@dataclass
class AdaptiveScale:
    """Robbins-Monro controlled proposal scale."""

    log_scale: float
    target: float = TARGET_SINGLE
    step_constant: float = 1.0
    update_count: int = 0

    @property
    def scale(self):
        return math.exp(self.log_scale)


def rm_constant(target, dim=1):
    """Robbins-Monro step constant of the Garthwaite-Fan-Sisson scheme.

    For a single site this is 1 / (p (1 - p)); for an m-dimensional block
    it adds the optimal-scaling term (1 - 1/m) sqrt(2 pi) exp(a^2 / 2) / (2 a)
    with a = -Phi^{-1}(p / 2).
    """
    c = 1.0 / (dim * target * (1.0 - target))
    if dim > 1:
        a = -ndtri(target / 2.0)
        c += (1.0 - 1.0 / dim) * math.sqrt(2.0 * math.pi) * math.exp(a * a / 2.0) / (2.0 * a)
    return c


def rm_start_index(target):
    """Counter value a (re)started search begins at: round(5 / (p (1 - p)))."""
    return int(round(5.0 / (target * (1.0 - target))))


def _restart_log(factor):
    return math.inf if factor is None else math.log(factor)


def rm_update(s, accepted):
    """Return ``s`` after one Robbins-Monro step with 1/k decay."""
    new = _kernel.rm_step(s.log_scale, s.update_count, bool(accepted), s.target, s.step_constant)
    return AdaptiveScale(new, s.target, s.step_constant, s.update_count + 1)


@dataclass(frozen=True)
class MCMCConfig:
    """Iteration counts and tuning constants for :func:`fit`.

    ``burnin1`` stage-1 sweeps are discarded before the correlation sample
    and the acceptance window; stage-1 scales keep adapting throughout.
    ``burnin`` is the stage-2 burn-in, after which scales are frozen and
    every ``thin``-th draw is kept. Step constants default to
    :func:`rm_constant` (per block dimension in stage 2). A search restarts
    from the current scale, with its counter back at :func:`rm_start_index`,
    whenever the scale has moved by more than ``restart_factor`` since the
    search began; ``None`` disables restarts. ``local_scaling`` switches
    stage 2 to state-dependent coordinate scales (:func:`localize_plan`);
    ``carry_moves`` adds the quantile-carrying centring moves of
    :class:`CarryMoves` to both stages.
    """

    iters1: int = 10_000
    iters2: int = 30_000
    thin: int = 10
    burnin: int = 10_000
    burnin1: int = None
    block_max: int = BLOCK_MAX
    step_single: float = None
    step_block: float = None
    restart_factor: float = RESTART_FACTOR
    local_scaling: bool = True
    carry_moves: bool = True
    chunk: int = 500

    def __post_init__(self):
        if self.iters1 < 1 or self.iters2 < 1:
            raise ValueError("iteration counts must be positive")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if not 0 <= self.burnin < self.iters2:
            raise ValueError("stage-2 burn-in must lie in [0, iters2)")
        if self.burnin1 is not None and not 0 <= self.burnin1 < self.iters1:
            raise ValueError("stage-1 burn-in must lie in [0, iters1)")
        if self.block_max < 1:
            raise ValueError("block_max must be positive")

    @property
    def stage1_burnin(self):
        return self.iters1 // 2 if self.burnin1 is None else self.burnin1

    @property
    def n_draws(self):
        return (self.iters2 - self.burnin) // self.thin


# ---------------------------------------------------------------------------
# chain plumbing


def to_internal(vec, config):
    """Natural parameters -> (..., v, log sigma2_u, log sigma_p) chain coordinates."""
    s = config.slices()
    out = np.array(vec, dtype=float)
    j = s["sigma2_u"].start
    out[..., s["u"]] = out[..., s["u"]] / np.sqrt(out[..., j:j + 1])
    out[..., j] = np.log(out[..., j])
    out[..., s["sigma_p"]] = np.log(out[..., s["sigma_p"]])
    return out


def log_jacobian(vec, config):
    """log |d natural / d internal| at natural parameters ``vec``.

    The chain's target is the log posterior plus this term.
    """
    vec = np.asarray(vec, dtype=float)
    s = config.slices()
    s2 = vec[..., s["sigma2_u"].start]
    return (0.5 * (config.K + 2) + 1.0) * np.log(s2) + np.log(vec[..., s["sigma_p"]]).sum(axis=-1)


def to_natural(vec, config):
    s = config.slices()
    out = np.array(vec, dtype=float)
    j = s["sigma2_u"].start
    out[..., j] = np.exp(out[..., j])
    out[..., s["u"]] = out[..., s["u"]] * np.sqrt(out[..., j:j + 1])
    out[..., s["sigma_p"]] = np.exp(out[..., s["sigma_p"]])
    return out


class _Chain:
    """Kernel inputs and cached state for one chain."""

    def __init__(self, state, data, geom):
        cfg = geom.config
        self.geom = geom
        if data is None or data.n == 0:
            x, y = np.zeros(0), np.zeros(0)
        else:
            x, y = np.asarray(data.x, dtype=float), np.asarray(data.y, dtype=float)
        P, T, K2, R4 = cfg.P, cfg.T, cfg.K + 2, cfg.R + 4
        n = y.size
        c = np.ascontiguousarray
        M = c(geom.quantile_weights(x)).reshape(n, P)
        Zx = c(geom.z_rows(x)).reshape(n, K2)
        Nx = c(geom.sd_weights(x)).reshape(n, R4)
        self.G = (c(y), M, c(x), Zx, Nx, c(geom.poly.vertex_x), c(geom.vertex_z),
                  c(geom.vertex_sd_weights), c(geom.log_mass)) + tuple(c(a) for a in tree_arrays(geom.tree))
        tau = np.asarray(cfg.levels, dtype=float)
        z = ndtri(tau)
        qinfo = np.exp(-z * z) / (2.0 * math.pi * tau * (1.0 - tau))
        self.G = self.G + (qinfo,)
        self.dims = (P, T, K2, R4, 0 if cfg.re_family == "normal" else 1)
        self.cur = self._caches(n, P, T)
        self.prop = self._caches(n, P, T)
        self.theta = to_internal(state.to_vector(), cfg)
        self.theta_new = self.theta.copy()
        total, status = _kernel.evaluate(self.theta, self.G, self.dims, self.cur)
        if not np.isfinite(total):
            raise ValueError(f"initial state has zero posterior density (status {status})")
        self.total = total
        self.zero_width = 0

    @staticmethod
    def _caches(n, P, T):
        return (np.zeros((n, T)), np.zeros(n), np.zeros(n), np.zeros(P), np.zeros(P),
                np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros(P), np.zeros(4))

    def state(self):
        return ModelState.from_vector(to_natural(self.theta, self.geom.config), self.geom.config)


def _progress_line(stage, it, total, rate):
    return f"stage={stage} iter={it} logpost={total:.4f} accept={rate:.3f}"


def _initial_log_scales(state, config):
    """Starting proposal scales from the spread of the initial state."""
    s = config.slices()
    sd = float(np.median(state.sigma_p))
    ls = np.empty(config.n_params)
    gaps = np.diff(state.Qp, axis=1)
    # vertex-quantile steps are relative to the centring sd at the vertex
    ls[s["Qp"]] = math.log(0.5 * (float(gaps.min()) / sd if gaps.size else 1.0))
    ls[s["beta"]] = math.log(1.0)
    ls[s["u"]] = math.log(1.0)
    ls[s["sigma2_u"]] = math.log(0.5)
    ls[s["sigma_p"]] = math.log(0.1)
    return ls


@dataclass
class CarryMoves:
    """Adaptive state of the quantile-carrying centring moves.

    ``idx`` lists the carried coordinates (beta, v, log sigma2_u, log sigma_p) in chain
    coordinates; scales adapt towards single-site acceptance in stage 1 and
    during stage-2 burn-in.
    """

    idx: np.ndarray
    log_scales: np.ndarray
    counts: np.ndarray

    @classmethod
    def initial(cls, state, config, frozen=None, enabled=True):
        s = config.slices()
        idx = np.arange(s["beta"].start, s["sigma_p"].stop if enabled else s["beta"].start)
        if frozen is not None:
            frozen = np.asarray(frozen, dtype=bool)
            # the move changes quantiles, so it needs them all free
            idx = idx[~frozen[idx]] if not frozen[s["Qp"]].any() else idx[:0]
        sd = float(np.median(state.sigma_p))
        ls = np.full(idx.size, math.log(0.1))
        ls[idx < s["u"].start] = math.log(0.1 * sd)
        ls[idx >= s["sigma2_u"].start] = math.log(0.05)
        return cls(idx.astype(np.int64), ls, np.full(idx.size, rm_start_index(TARGET_SINGLE), dtype=np.int64))

    def draws(self, rng, C):
        return rng.standard_normal((C, self.idx.size)), np.log(rng.random((C, self.idx.size)))


def _rates(acc, tries):
    return np.where(tries > 0, acc / np.maximum(tries, 1), np.nan)


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class Stage1Result:
    """Output of the single-site stage.

    ``internal_samples`` holds the post-burn-in sweeps in chain coordinates
    (see :func:`to_internal`), the scale blocks are built on. ``acceptance`` is measured on
    the same window; NaN for frozen parameters.
    """

    internal_samples: np.ndarray
    log_scales: np.ndarray
    acceptance: np.ndarray
    state: ModelState
    active: np.ndarray
    zero_width: int
    log_posterior: float
    carry: CarryMoves = None
    carry_acceptance: np.ndarray = None

    def samples(self, config):
        return to_natural(self.internal_samples, config)


def stage1_run(state, data, geom, iters, rng, burn_in=None, frozen=None, log_scales=None,
               step_constant=None, restart_factor=RESTART_FACTOR, chunk=500, progress=None,
               carry=True):
    """Single-site adaptive Metropolised Gibbs sweeps.

    Parameters
    ----------
    state : ModelState
        Starting point; must have finite posterior density.
    iters : int
        Number of sweeps over all non-frozen parameters.
    rng : numpy.random.Generator
    burn_in : int, optional
        Sweeps discarded from the returned samples and the acceptance
        window; defaults to ``iters // 2``.
    frozen : array of bool, optional
        Mask over the natural parameter vector of coordinates kept fixed.
    log_scales : array, optional
        Initial log proposal scales (defaults from the state's spread).
    step_constant : float, optional
        Robbins-Monro constant; defaults to ``rm_constant(0.44)``.
    restart_factor : float or None
        Scale ratio that triggers a restarted search (see :class:`MCMCConfig`).
    progress : callable, optional
        Receives one ``key=value`` line per chunk.
    carry : bool
        Follow every sweep with the quantile-carrying centring moves
        (see :class:`CarryMoves`).
    """
    cfg = geom.config
    step_constant = rm_constant(TARGET_SINGLE) if step_constant is None else float(step_constant)
    burn_in = iters // 2 if burn_in is None else int(burn_in)
    if not 0 <= burn_in < iters:
        raise ValueError("burn_in must lie in [0, iters)")
    chain = _Chain(state, data, geom)
    D = cfg.n_params
    frozen = np.zeros(D, dtype=bool) if frozen is None else np.asarray(frozen, dtype=bool)
    active = np.flatnonzero(~frozen).astype(np.int64)
    ls = _initial_log_scales(state, cfg) if log_scales is None else np.array(log_scales, dtype=float)
    n0 = rm_start_index(TARGET_SINGLE)
    counts = np.full(D, n0, dtype=np.int64)
    anchor = ls.copy()
    acc_all = np.zeros(D, dtype=np.int64)
    tries_all = np.zeros(D, dtype=np.int64)
    acc_win = np.zeros(D, dtype=np.int64)
    tries_win = np.zeros(D, dtype=np.int64)
    nQ = cfg.P * cfg.T
    carry = CarryMoves.initial(state, cfg, frozen, enabled=carry)
    nc = carry.idx.size
    c_anchor = carry.log_scales.copy()
    c_all, c_tries_all = np.zeros(nc, dtype=np.int64), np.zeros(nc, dtype=np.int64)
    c_win, c_tries_win = np.zeros(nc, dtype=np.int64), np.zeros(nc, dtype=np.int64)
    out = np.empty((iters - burn_in, D))
    done = 0
    while done < iters:
        # split chunks at the burn-in boundary so the window counters start clean
        stop = min(done + chunk, iters) if done >= burn_in else min(done + chunk, burn_in)
        C = stop - done
        steps = rng.standard_normal((C, D))
        steps[:, :nQ] = rng.uniform(-1.0, 1.0, size=(C, nQ))
        log_u = np.log(rng.random((C, D)))
        c_steps, c_u = carry.draws(rng, C)
        in_window = done >= burn_in
        acc, tries = (acc_win, tries_win) if in_window else (acc_all, tries_all)
        c_state = (carry.log_scales, carry.counts, c_anchor) + \
            ((c_win, c_tries_win) if in_window else (c_all, c_tries_all))
        store = out[done - burn_in:stop - burn_in] if in_window else np.empty((0, D))
        # Qp coordinates get Uniform(-scale, scale) steps, the rest Normal ones
        chain.total, zw = _kernel.single_site_chunk(
            chain.theta, chain.theta_new, chain.G, chain.dims, chain.cur, chain.prop, chain.total,
            active, ls, counts, anchor, acc, tries, TARGET_SINGLE, step_constant,
            _restart_log(restart_factor), n0, True,
            steps, log_u, store, 0 if in_window else C, carry.idx, c_state, c_steps, c_u)
        chain.zero_width += zw
        done = stop
        if progress is not None:
            rate = acc[active].sum() / max(1, tries[active].sum())
            progress(_progress_line(1, done, chain.total, rate))
    return Stage1Result(out, ls, _rates(acc_win, tries_win), chain.state(), active, chain.zero_width,
                        chain.total, carry, _rates(c_win, c_tries_win))


# ---------------------------------------------------------------------------
# blocks


@dataclass
class BlockPlan:
    """Partition of parameter indices with per-block proposal covariances.

    With ``local_scale`` set (one entry per parameter, see
    :func:`localize_plan`) only the correlation of each ``proposal_cov`` is
    used and coordinate scales follow the current state. ``gap_scale`` then
    optionally holds, per block, the fixed log-gap step of each member
    (zero for members moved on their own scale).
    """

    blocks: list
    proposal_cov: list
    scales: list
    cut_height: float
    local_scale: np.ndarray = None
    gap_scale: list = None

    @property
    def sizes(self):
        return [len(b) for b in self.blocks]


def _correlation(samples):
    sd = samples.std(axis=0)
    ok = sd > 0
    rho = np.eye(samples.shape[1])
    if ok.sum() > 1:
        sub = np.corrcoef(samples[:, ok], rowvar=False)
        rho[np.ix_(ok, ok)] = np.atleast_2d(sub)
    np.fill_diagonal(rho, 1.0)
    return np.clip(np.nan_to_num(rho), -1.0, 1.0)


def cluster_blocks(rho, block_max=BLOCK_MAX, cut_height=None):
    """Complete-linkage blocks on distance 1 - |rho|.

    The dendrogram is cut at the highest merge level at which no block
    exceeds ``block_max`` (the coarsest admissible partition); a supplied
    ``cut_height`` lowers that level further. Returns (blocks, height).
    """
    d = rho.shape[0]
    if d == 1:
        return [np.array([0])], 0.0
    dist = 1.0 - np.abs(rho)
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    Z = linkage(squareform(np.clip(dist, 0.0, None), checks=False), method="complete")
    best = 0.0
    for h in np.unique(np.concatenate([[0.0], Z[:, 2]])):
        labels = fcluster(Z, h, criterion="distance")
        if np.bincount(labels).max() > block_max:
            break
        best = float(h)
    if cut_height is not None:
        best = min(best, float(cut_height))
    labels = fcluster(Z, best, criterion="distance")
    if np.bincount(labels).max() > block_max:
        # ties at height 0 (e.g. duplicated columns) can still overflow
        labels = fcluster(Z, block_max, criterion="maxclust") if d <= block_max else labels
    blocks = [np.flatnonzero(labels == k) for k in np.unique(labels)]
    blocks = _split_oversize(blocks, block_max)
    blocks.sort(key=lambda b: b[0])
    return blocks, best


def _split_oversize(blocks, block_max):
    out = []
    for b in blocks:
        for start in range(0, len(b), block_max):
            out.append(b[start:start + block_max])
    return out


def build_blocks(samples, block_max=BLOCK_MAX, cut_height=None, active=None):
    """Block plan from stage-1 samples (rows = draws, columns = parameters).

    Only ``active`` columns (default: all) enter the blocks. Each block
    proposal covariance is the member sample covariance plus
    1e-8 * trace / dim on the diagonal.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2:
        raise ValueError("samples must be a 2-d array")
    if samples.shape[0] < MIN_CORRELATION_SAMPLES:
        raise ValueError(f"at least {MIN_CORRELATION_SAMPLES} samples are needed, got {samples.shape[0]}")
    active = np.arange(samples.shape[1]) if active is None else np.asarray(active)
    sub = samples[:, active]
    rho = _correlation(sub)
    local, height = cluster_blocks(rho, block_max, cut_height)
    blocks, covs, scales = [], [], []
    for b in local:
        idx = active[b]
        S = np.atleast_2d(np.cov(sub[:, b], rowvar=False))
        dim = S.shape[0]
        tr = float(np.trace(S))
        if tr <= 0 or not np.isfinite(tr):
            logger.warning("block %s has no sample variance; using identity", idx.tolist())
            S, tr = np.eye(dim), float(dim)
        elif np.linalg.matrix_rank(S) < dim:
            logger.warning("rank-deficient sample covariance for block %s; ridge applied", idx.tolist())
        S = S + RIDGE * tr / dim * np.eye(dim)
        blocks.append(idx)
        covs.append(S)
        scales.append(AdaptiveScale(math.log(2.38 / math.sqrt(dim)), TARGET_BLOCK,
                                    rm_constant(TARGET_BLOCK, dim), rm_start_index(TARGET_BLOCK)))
    return BlockPlan(blocks, covs, scales, height)


def gap_predecessors(block, config):
    """Position in ``block`` of each member's lower neighbour in its vertex row.

    Entry r is the position of Q[p, t - 1] when member r is Q[p, t] and
    Q[p, t - 1] is also in the block, otherwise -1.
    """
    block = np.asarray(block)
    nQ, T = config.P * config.T, config.T
    pos = {int(j): r for r, j in enumerate(block)}
    return np.array([pos.get(int(j) - 1, -1) if j < nQ and j % T > 0 else -1 for j in block],
                    dtype=np.int64)


def localize_plan(plan, log_scales, config, samples=None):
    """Switch ``plan`` to state-dependent coordinate scales from stage 1.

    Coordinate j then moves on the scale of its tuned stage-1 step,
    exp(log_scales[j]) times the stage-1 state-dependent factor (divided by
    sqrt(3) for vertex quantiles, whose stage-1 steps are uniform
    half-widths), while the block's sample correlation sets the shape.
    Block scales restart at 1 / sqrt(dim).

    With stage-1 internal ``samples`` (rows = draws), a vertex quantile whose
    lower neighbour shares its block moves on the log of their gap instead.
    The block correlation is then taken in those coordinates, and the log-gap
    step is 2.38 times the sample conditional sd of the log gap given
    the other block members, matching the single-site steps, which sit near
    2.38 conditional sd.
    """
    base = np.exp(np.asarray(log_scales, dtype=float))
    base[config.slices()["Qp"]] /= math.sqrt(3.0)
    scales = [AdaptiveScale(-0.5 * math.log(len(b)), TARGET_BLOCK, s.step_constant,
                            rm_start_index(TARGET_BLOCK)) for b, s in zip(plan.blocks, plan.scales)]
    if samples is None:
        return BlockPlan(plan.blocks, plan.proposal_cov, scales, plan.cut_height, base)
    samples = np.asarray(samples, dtype=float)
    covs, gaps = [], []
    for b, S in zip(plan.blocks, plan.proposal_cov):
        lag = gap_predecessors(b, config)
        g = np.zeros(len(b))
        if np.all(lag < 0):
            covs.append(S)
            gaps.append(g)
            continue
        eta = samples[:, b].copy()
        has = lag >= 0
        diff = samples[:, b[has]] - samples[:, b[lag[has]]]
        if np.any(diff <= 0):
            raise ValueError("stage-1 samples contain unordered vertex quantiles")
        eta[:, has] = np.log(diff)
        C = np.atleast_2d(np.cov(eta, rowvar=False))
        dim = len(b)
        C = C + RIDGE * float(np.trace(C)) / dim * np.eye(dim)
        cond_sd = 1.0 / np.sqrt(np.diag(np.linalg.inv(C)))
        g[has] = 2.38 * cond_sd[has]
        covs.append(C)
        gaps.append(g)
    return BlockPlan(plan.blocks, covs, scales, plan.cut_height, base, gaps)


def _cov_to_corr(S):
    d = np.sqrt(np.diag(S))
    return S / np.outer(d, d)


# ---------------------------------------------------------------------------
# stage 2 and results


@dataclass
class CurveSummary:
    """Posterior summaries of the quantile curves, arrays of shape (len(x), T)."""

    x: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


@dataclass
class ChainResult:
    draws: np.ndarray
    param_names: list
    geometry: object = field(repr=False)
    plan: BlockPlan = field(repr=False)
    acceptance: dict = field(default_factory=dict)
    ess: np.ndarray = None
    summaries: CurveSummary = None
    diagnostics: dict = field(default_factory=dict)
    log_posterior: float = math.nan

    @property
    def n_draws(self):
        return self.draws.shape[0]

    def qp_draws(self):
        cfg = self.geometry.config
        return self.draws[:, cfg.slices()["Qp"]].reshape(-1, cfg.P, cfg.T)

    def curve_draws(self, x):
        """Quantile-curve draws at ``x``: shape (n_draws, len(x), T)."""
        W = np.atleast_2d(self.geometry.quantile_weights(np.atleast_1d(np.asarray(x, dtype=float))))
        return np.einsum("gp,dpt->dgt", W, self.qp_draws())

    def summarize(self, x, level=0.95):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        Q = self.curve_draws(x)
        a = 0.5 * (1.0 - level)
        lo, hi = np.quantile(Q, [a, 1.0 - a], axis=0)
        return CurveSummary(x, Q.mean(axis=0), Q.std(axis=0), lo, hi)

    def posterior_mean_state(self):
        return ModelState.from_vector(self.draws.mean(axis=0), self.geometry.config)


def effective_sample_size(draws):
    """Per-column ESS with Geyer's initial positive sequence estimator."""
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    out = np.full(d, float(n))
    if n < 4:
        return out
    xc = x - x.mean(axis=0)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=0)[:n] / n
    for j in range(d):
        if acov[0, j] <= 0:
            continue
        rho = acov[:, j] / acov[0, j]
        tau = -1.0
        for k in range(0, n - 1, 2):
            pair = rho[k] + rho[k + 1]
            if pair <= 0:
                break
            tau += 2.0 * pair
        out[j] = n / max(tau, 1e-12)
    return out


def stage2_run(state, data, geom, plan, iters, thin, burn_in, rng, step_constant=None,
               restart_factor=RESTART_FACTOR, chunk=500, progress=None, carry=None):
    """Block Metropolis-Hastings with Robbins-Monro scales frozen after burn-in.

    Each block's scale uses its own step constant from ``plan`` unless
    ``step_constant`` overrides them all. When ``carry`` is given (as
    :func:`fit` does with the stage-1 state), every iteration also runs its
    quantile-carrying centring moves; by default only blocks move.
    """
    cfg = geom.config
    if not 0 <= burn_in < iters:
        raise ValueError("burn_in must lie in [0, iters)")
    chain = _Chain(state, data, geom)
    nb = len(plan.blocks)
    bmax = max(len(b) for b in plan.blocks)
    block_idx = np.zeros((nb, bmax), dtype=np.int64)
    block_len = np.array([len(b) for b in plan.blocks], dtype=np.int64)
    chol = np.zeros((nb, bmax, bmax))
    local = plan.local_scale is not None
    base = np.asarray(plan.local_scale, dtype=float) if local else np.ones(cfg.n_params)
    lag = np.full((nb, bmax), -1, dtype=np.int64)
    gscale = np.zeros((nb, bmax))
    for k, (b, S) in enumerate(zip(plan.blocks, plan.proposal_cov)):
        if np.any(np.diff(b) <= 0):
            raise ValueError("block members must be in increasing order")
        block_idx[k, :len(b)] = b
        if local and plan.gap_scale is not None:
            g = np.asarray(plan.gap_scale[k], dtype=float)
            lag[k, :len(b)] = np.where(g > 0, gap_predecessors(b, cfg), -1)
            gscale[k, :len(b)] = g
        chol[k, :len(b), :len(b)] = np.linalg.cholesky(_cov_to_corr(S) if local else S)
    ls = np.array([s.log_scale for s in plan.scales])
    counts = np.array([s.update_count for s in plan.scales], dtype=np.int64)
    steps = np.array([s.step_constant if step_constant is None else step_constant for s in plan.scales])
    anchor = ls.copy()
    n0 = rm_start_index(TARGET_BLOCK)
    acc_b = np.zeros(nb, dtype=np.int64)
    tries_b = np.zeros(nb, dtype=np.int64)
    acc_w = np.zeros(nb, dtype=np.int64)
    tries_w = np.zeros(nb, dtype=np.int64)
    carry = CarryMoves.initial(state, cfg, enabled=False) if carry is None else \
        CarryMoves(carry.idx, carry.log_scales.copy(), carry.counts.copy())
    nc = carry.idx.size
    c_anchor = carry.log_scales.copy()
    c_b, c_tries_b = np.zeros(nc, dtype=np.int64), np.zeros(nc, dtype=np.int64)
    c_w, c_tries_w = np.zeros(nc, dtype=np.int64), np.zeros(nc, dtype=np.int64)
    n_keep = (iters - burn_in) // thin
    out = np.empty((n_keep, cfg.n_params))
    done = 0
    while done < iters:
        stop = min(done + chunk, iters) if done >= burn_in else min(done + chunk, burn_in)
        C = stop - done
        z = rng.standard_normal((C, nb, bmax))
        log_u = np.log(rng.random((C, nb)))
        c_steps, c_u = carry.draws(rng, C)
        adapt = done < burn_in
        acc, tries = (acc_b, tries_b) if adapt else (acc_w, tries_w)
        c_state = (carry.log_scales, carry.counts, c_anchor) + \
            ((c_b, c_tries_b) if adapt else (c_w, c_tries_w))
        chain.total, zw = _kernel.block_chunk(
            chain.theta, chain.theta_new, chain.G, chain.dims, chain.cur, chain.prop, chain.total,
            block_idx, block_len, chol, base, local, lag, gscale, ls, counts, anchor, acc, tries, TARGET_BLOCK, steps,
            _restart_log(restart_factor), n0, adapt,
            z, log_u, out, done, burn_in, thin, carry.idx, c_state, c_steps, c_u,
            TARGET_SINGLE, rm_constant(TARGET_SINGLE), rm_start_index(TARGET_SINGLE))
        chain.zero_width += zw
        done = stop
        if progress is not None:
            progress(_progress_line(2, done, chain.total, acc.sum() / max(1, tries.sum())))
    plan.scales = [AdaptiveScale(float(l), TARGET_BLOCK, float(c), int(k))
                   for l, c, k in zip(ls, steps, counts)]
    draws = to_natural(out, cfg)
    names = cfg.param_names()
    result = ChainResult(draws=draws, param_names=names, geometry=geom, plan=plan,
                         acceptance={"stage2": _rates(acc_w, tries_w),
                                     "carry2": _rates(c_w, c_tries_w)},
                         log_posterior=chain.total)
    result.diagnostics["carry_names"] = [names[j] for j in carry.idx]
    result.diagnostics["carry"] = carry
    result.ess = effective_sample_size(draws)
    result.diagnostics["zero_width_bin"] = chain.zero_width
    return result


def stderr_progress(line):
    print(line, file=sys.stderr, flush=True)


def fit(data, geom, mcmc=None, rng=None, state=None, grid=None, progress=None):
    """Run both stages from ``state`` (default :func:`initial_state`).

    Returns a :class:`ChainResult` with stage-1 acceptance, block plan and,
    when ``grid`` is given, curve summaries on it.
    """
    mcmc = MCMCConfig() if mcmc is None else mcmc
    rng = np.random.default_rng() if rng is None else rng
    state = initial_state(data, geom) if state is None else state
    s1 = stage1_run(state, data, geom, mcmc.iters1, rng, burn_in=mcmc.stage1_burnin,
                    step_constant=mcmc.step_single, restart_factor=mcmc.restart_factor,
                    chunk=mcmc.chunk, progress=progress, carry=mcmc.carry_moves)
    plan = build_blocks(s1.internal_samples, mcmc.block_max, active=s1.active)
    if mcmc.local_scaling:
        plan = localize_plan(plan, s1.log_scales, geom.config, s1.internal_samples)
    result = stage2_run(s1.state, data, geom, plan, mcmc.iters2, mcmc.thin, mcmc.burnin, rng,
                        step_constant=mcmc.step_block, restart_factor=mcmc.restart_factor,
                        chunk=mcmc.chunk, progress=progress, carry=s1.carry)
    result.acceptance["stage1"] = s1.acceptance
    result.acceptance["carry1"] = s1.carry_acceptance
    result.diagnostics["zero_width_bin"] += s1.zero_width
    result.diagnostics["vertex_basis_condition"] = geom.poly.condition
    result.diagnostics["n_blocks"] = len(plan.blocks)
    if grid is not None:
        result.summaries = result.summarize(grid)
    return result

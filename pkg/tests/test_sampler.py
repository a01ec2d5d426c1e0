import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pqps import _kernel
from pqps.model import (ModelConfig, ModelState, build_geometry, initial_state, log_posterior,
                        vertex_centring)
from pqps.pyramid import sample_pyramid
from pqps.sampler import (
    AdaptiveScale,
    BlockPlan,
    MCMCConfig,
    _Chain,
    build_blocks,
    cluster_blocks,
    effective_sample_size,
    fit,
    gap_predecessors,
    localize_plan,
    log_jacobian,
    rm_constant,
    rm_start_index,
    rm_update,
    stage1_run,
    stage2_run,
    to_internal,
    to_natural,
)
from pqps.simharness import DesignSpec, generate


# ---------------------------------------------------------------------------
# Robbins-Monro


def test_rm_update_directions_and_decay():
    s = AdaptiveScale(0.0, target=0.44, step_constant=2.0, update_count=10)
    up = rm_update(s, True)
    down = rm_update(s, False)
    assert up.log_scale == pytest.approx(2.0 * 0.56 / 10)
    assert down.log_scale == pytest.approx(-2.0 * 0.44 / 10)
    assert up.update_count == down.update_count == 11
    # later updates are smaller
    assert rm_update(up, True).log_scale - up.log_scale < up.log_scale


@given(st.floats(0.05, 0.95), st.integers(1, 10_000))
def test_rm_update_has_zero_drift_at_target(p, k):
    s = AdaptiveScale(0.3, target=p, step_constant=1.5, update_count=k)
    drift = p * (rm_update(s, True).log_scale - 0.3) + (1 - p) * (rm_update(s, False).log_scale - 0.3)
    assert abs(drift) < 1e-12


def test_rm_converges_to_target_on_normal():
    # one-dimensional N(0,1) random-walk Metropolis; optimal scale ~2.4
    rng = np.random.default_rng(3)
    s = AdaptiveScale(math.log(0.1), 0.44, rm_constant(0.44), rm_start_index(0.44))
    x, acc = 0.0, []
    for i in range(40_000):
        y = x + s.scale * rng.standard_normal()
        ok = math.log(rng.random()) < 0.5 * (x * x - y * y)
        x = y if ok else x
        s = rm_update(s, ok)
        if i >= 20_000:
            acc.append(ok)
    assert np.mean(acc) == pytest.approx(0.44, abs=0.02)
    assert 1.8 < s.scale < 3.2


def test_rm_constants():
    assert rm_constant(0.44) == pytest.approx(1 / (0.44 * 0.56))
    assert rm_constant(0.23, 8) < rm_constant(0.23, 1)
    assert rm_start_index(0.44) == round(5 / (0.44 * 0.56))


# ---------------------------------------------------------------------------
# blocks and diagnostics


def test_cluster_blocks_recovers_groups():
    rho = np.eye(7)
    for g in ([0, 3, 5], [1, 2], [4, 6]):
        for i in g:
            for j in g:
                rho[i, j] = 1.0 if i == j else 0.9
    blocks, _ = cluster_blocks(rho, block_max=3)
    assert sorted(map(list, blocks)) == [[0, 3, 5], [1, 2], [4, 6]]


@given(st.integers(2, 30), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_cluster_blocks_partition_and_size_cap(d, bmax, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(d, d))
    S = A @ A.T + 1e-3 * np.eye(d)
    sd = np.sqrt(np.diag(S))
    blocks, _ = cluster_blocks(S / np.outer(sd, sd), block_max=bmax)
    flat = np.sort(np.concatenate(blocks))
    np.testing.assert_array_equal(flat, np.arange(d))
    assert max(len(b) for b in blocks) <= bmax


def test_build_blocks_covariance_and_requirements(rng):
    z = rng.normal(size=(2000, 2))
    samples = np.column_stack([z[:, 0], z[:, 0] + 0.1 * z[:, 1], 5 * z[:, 1], rng.normal(size=2000)])
    plan = build_blocks(samples, block_max=2)
    assert [0, 1] in [list(b) for b in plan.blocks]
    assert max(plan.sizes) == 2
    k = [list(b) for b in plan.blocks].index([0, 1])
    S = np.cov(samples[:, :2], rowvar=False)
    np.testing.assert_allclose(plan.proposal_cov[k], S + 1e-8 * np.trace(S) / 2 * np.eye(2))
    assert plan.scales[k].log_scale == pytest.approx(math.log(2.38 / math.sqrt(2)))
    with pytest.raises(ValueError):
        build_blocks(samples[:100])


def test_build_blocks_zero_variance_column(rng):
    samples = np.column_stack([rng.normal(size=600), np.ones(600)])
    plan = build_blocks(samples, block_max=1)
    assert all(np.all(np.linalg.eigvalsh(S) > 0) for S in plan.proposal_cov)


def test_effective_sample_size():
    rng = np.random.default_rng(0)
    n = 20_000
    iid = rng.normal(size=n)
    assert effective_sample_size(iid)[0] == pytest.approx(n, rel=0.1)
    rho = 0.8
    x = np.empty(n)
    x[0] = 0.0
    e = rng.normal(size=n)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + e[t]
    assert effective_sample_size(x)[0] == pytest.approx(n * (1 - rho) / (1 + rho), rel=0.2)


def test_mcmc_config_validation():
    assert MCMCConfig().n_draws == 2000
    assert MCMCConfig().stage1_burnin == 5000
    for bad in (dict(thin=0), dict(iters2=100, burnin=100), dict(iters1=0), dict(burnin1=10_000)):
        with pytest.raises(ValueError):
            MCMCConfig(**bad)


# ---------------------------------------------------------------------------
# chain coordinates and compiled posterior


def small_problem(re_family="normal", n=40, seed=0):
    cfg = ModelConfig((0.2, 0.5, 0.9), K=3, R=1, re_family=re_family)
    geom = build_geometry(cfg)
    data, _ = generate(DesignSpec(2, n=n), np.random.default_rng(seed))
    return cfg, geom, data


def jitter_state(state, cfg, rng):
    v = state.to_vector().copy()
    s = cfg.slices()
    v[s["Qp"]] += 0.05 * rng.standard_normal(cfg.P * cfg.T)
    Qp = np.sort(v[s["Qp"]].reshape(cfg.P, cfg.T), axis=1)
    v[s["Qp"]] = Qp.ravel()
    v[s["beta"]] += 0.1 * rng.standard_normal(2)
    v[s["u"]] = 0.3 * rng.standard_normal(cfg.K + 2)
    v[s["sigma2_u"]] = rng.uniform(0.2, 3.0)
    v[s["sigma_p"]] *= rng.uniform(0.7, 1.4, cfg.R + 4)
    return v


@given(st.integers(0, 2**32 - 1))
def test_internal_coordinates_roundtrip(seed):
    cfg = ModelConfig((0.3, 0.6), K=2, R=1)
    rng = np.random.default_rng(seed)
    v = np.concatenate([rng.normal(size=cfg.P * cfg.T + 2 + cfg.K + 2), [rng.uniform(0.01, 10)],
                        rng.uniform(0.05, 5, cfg.R + 4)])
    np.testing.assert_allclose(to_natural(to_internal(v, cfg), cfg), v, rtol=1e-12)


def test_log_jacobian_matches_numerical_determinant(rng):
    cfg = ModelConfig((0.5,), K=1, R=0)
    v = np.concatenate([rng.normal(size=cfg.P + 2 + 3), [0.7], rng.uniform(0.5, 2, 4)])
    th = to_internal(v, cfg)
    J = np.empty((th.size, th.size))
    h = 1e-6
    for j in range(th.size):
        e = np.zeros(th.size)
        e[j] = h
        J[:, j] = (to_natural(th + e, cfg) - to_natural(th - e, cfg)) / (2 * h)
    assert log_jacobian(v, cfg) == pytest.approx(np.linalg.slogdet(J)[1], abs=1e-6)


@pytest.mark.parametrize("family", ["normal", "cauchy"])
def test_compiled_posterior_matches_reference(family):
    cfg, geom, data = small_problem(family)
    rng = np.random.default_rng(1)
    chain = _Chain(initial_state(data, geom), data, geom)
    for _ in range(10):
        v = jitter_state(initial_state(data, geom), cfg, rng)
        total, status = _kernel.evaluate(to_internal(v, cfg), chain.G, chain.dims, chain.cur)
        ref = log_posterior(ModelState.from_vector(v, cfg), data, geom) + log_jacobian(v, cfg)
        assert status == _kernel.OK
        assert total == pytest.approx(ref, rel=1e-11, abs=1e-9)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_incremental_proposal_matches_full_evaluation(seed, k):
    cfg, geom, data = small_problem()
    rng = np.random.default_rng(seed)
    chain = _Chain(ModelState.from_vector(jitter_state(initial_state(data, geom), cfg, rng), cfg), data, geom)
    idx = np.sort(rng.choice(cfg.n_params, size=k, replace=False)).astype(np.int64)
    delta = 0.02 * rng.standard_normal(k)
    total, status = _kernel.propose(chain.theta, chain.theta_new, idx, delta, chain.G, chain.dims,
                                    chain.cur, chain.prop)
    full, status_full = _kernel.evaluate(chain.theta_new.copy(), chain.G, chain.dims, chain.cur)
    if status == _kernel.OK:
        assert total == pytest.approx(full, rel=1e-12, abs=1e-9)
    else:
        assert full == -math.inf


def test_step_factor_ignores_its_own_coordinate(rng):
    cfg, geom, data = small_problem()
    chain = _Chain(initial_state(data, geom), data, geom)
    s = cfg.slices()
    coords = list(range(cfg.P * cfg.T)) + list(range(s["beta"].start, s["u"].stop))
    for j in coords:
        f0 = _kernel.step_factor(j, chain.theta, chain.G, chain.dims, chain.cur)
        th = chain.theta.copy()
        th[j] += 1e-3
        assert _kernel.step_factor(j, th, chain.G, chain.dims, chain.cur) == f0


def run_carry(chain, carry_idx, steps, cfg):
    nc = len(carry_idx)
    state = (np.zeros(nc), np.ones(nc, dtype=np.int64), np.zeros(nc), np.zeros(nc, dtype=np.int64),
             np.zeros(nc, dtype=np.int64))
    buf = cfg.P * cfg.T + 1
    total, _ = _kernel.carry_pass(chain.theta, chain.theta_new, chain.G, chain.dims, chain.cur, chain.prop,
                                  chain.total, np.asarray(carry_idx, dtype=np.int64), *state, 0.44, 1.0,
                                  math.inf, 1, False, np.asarray(steps, dtype=float), np.full(nc, -np.inf),
                                  np.empty(buf, dtype=np.int64), np.empty(buf))
    chain.total = total
    return state[3]


@pytest.mark.parametrize("name", ["beta0", "beta1", "u3", "sigma2_u", "sigma_p2"])
def test_carry_move_keeps_standardised_quantiles_and_reverses(name, rng):
    cfg, geom, data = small_problem()
    v = jitter_state(initial_state(data, geom), cfg, rng)
    chain = _Chain(ModelState.from_vector(v, cfg), data, geom)
    j = cfg.param_names().index(name)
    before = chain.theta.copy()
    mu0, sd0 = vertex_centring(chain.state(), geom)
    w0 = (chain.state().Qp - mu0[:, None]) / sd0[:, None]
    accepted = run_carry(chain, [j], [0.3], cfg)
    assert accepted[0] == 1
    moved = chain.state()
    mu1, sd1 = vertex_centring(moved, geom)
    np.testing.assert_allclose((moved.Qp - mu1[:, None]) / sd1[:, None], w0, atol=1e-10)
    assert chain.theta[j] == pytest.approx(before[j] + 0.3)
    assert chain.total == pytest.approx(_kernel.evaluate(chain.theta.copy(), chain.G, chain.dims,
                                                         chain.prop)[0], abs=1e-8)
    run_carry(chain, [j], [-0.3], cfg)
    np.testing.assert_allclose(chain.theta, before, atol=1e-10)


def test_carry_move_jacobian_matches_numerical_determinant(rng):
    # the map theta -> theta' for a fixed step d is a diffeomorphism on
    # (sigma_p, Q); its log-determinant must be T sum_p log(sd'_p / sd_p)
    cfg, geom, data = small_problem()
    chain = _Chain(ModelState.from_vector(jitter_state(initial_state(data, geom), cfg, rng), cfg), data, geom)
    j = cfg.param_names().index("sigma_p1")
    d = 0.4

    def mapped(theta):
        ch = _Chain(ModelState.from_vector(to_natural(theta, cfg), cfg), data, geom)
        run_carry(ch, [j], [d], cfg)
        return ch.theta.copy()

    th = chain.theta.copy()
    sub = list(range(cfg.P * cfg.T)) + [j]
    J = np.empty((len(sub), len(sub)))
    h = 1e-6
    for c, k in enumerate(sub):
        e = np.zeros(th.size)
        e[k] = h
        J[:, c] = (mapped(th + e)[sub] - mapped(th - e)[sub]) / (2 * h)
    _, sd0 = vertex_centring(chain.state(), geom)
    st = chain.state()
    st.sigma_p = st.sigma_p.copy()
    st.sigma_p[1] *= math.exp(d)
    _, sd1 = vertex_centring(st, geom)
    assert np.linalg.slogdet(J)[1] == pytest.approx(cfg.T * np.log(sd1 / sd0).sum(), abs=1e-5)


def test_chains_with_and_without_carry_moves_agree():
    cfg = ModelConfig((0.3, 0.7), K=1, R=0)
    geom = build_geometry(cfg)
    data, _ = generate(DesignSpec(1, n=30), np.random.default_rng(5))
    state = initial_state(data, geom)
    names = cfg.param_names()
    cols = [names.index(c) for c in ("Q[0,0]", "Q[2,1]", "beta1", "sigma_p0", "sigma2_u")]
    means = []
    for carry in (False, True):
        r = stage1_run(state, data, geom, 60_000, np.random.default_rng(11), burn_in=5000, carry=carry)
        x = r.internal_samples[:, cols]
        means.append((x.mean(axis=0), np.array([batch_se(c) for c in x.T])))
    (m0, se0), (m1, se1) = means
    assert np.all(np.abs(m0 - m1) < 4 * np.sqrt(se0 ** 2 + se1 ** 2) + 1e-3)


# ---------------------------------------------------------------------------
# the samplers target the right distribution


def batch_se(x, batches=40):
    means = np.array([b.mean() for b in np.array_split(x, batches)])
    return means.std(ddof=1) / math.sqrt(batches)


@pytest.fixture(scope="module")
def tiny():
    """K = 0 problem where (v, log sigma2_u) can be integrated on a grid."""
    cfg = ModelConfig((0.3, 0.7), K=0, R=0)
    geom = build_geometry(cfg)
    data, _ = generate(DesignSpec(1, n=20), np.random.default_rng(1))
    state = initial_state(data, geom)
    state.u = np.array([0.3, -0.2])
    state.sigma2_u = 0.5
    return cfg, geom, data, state


def grid_mean_log_s2(cfg, geom, data, state, u1_fixed=None):
    """Posterior mean of log sigma2_u by quadrature over (l, v0[, v1])."""
    chain = _Chain(state, data, geom)
    s = cfg.slices()
    ou, os2 = s["u"].start, s["sigma2_u"].start
    L = np.linspace(-12, 8, 161)
    V = np.linspace(-5, 5, 41)
    th0 = chain.theta.copy()
    marg = np.empty(L.size)
    for a, l in enumerate(L):
        vals = []
        for v0 in V:
            for v1 in (V if u1_fixed is None else [u1_fixed / math.exp(0.5 * l)]):
                th = th0.copy()
                th[os2], th[ou], th[ou + 1] = l, v0, v1
                total = _kernel.evaluate(th, chain.G, chain.dims, chain.cur)[0]
                # with u1 held fixed its Jacobian exp(-l/2) enters
                vals.append(total - (0.5 * l if u1_fixed is not None else 0.0))
        vals = np.array(vals)
        m = vals.max()
        marg[a] = m + math.log(np.exp(vals - m).sum())
    w = np.exp(marg - marg.max())
    return float((w * L).sum() / w.sum())


def test_single_site_sampler_matches_quadrature(tiny):
    cfg, geom, data, state = tiny
    s = cfg.slices()
    frozen = np.ones(cfg.n_params, bool)
    frozen[s["u"]] = False
    frozen[s["sigma2_u"]] = False
    r = stage1_run(state, data, geom, 150_000, np.random.default_rng(2), burn_in=2000, frozen=frozen)
    l = np.log(r.samples(cfg)[:, s["sigma2_u"].start])
    ref = grid_mean_log_s2(cfg, geom, data, state)
    assert abs(l.mean() - ref) < 4 * batch_se(l) + 0.01


def test_local_block_sampler_matches_quadrature(tiny):
    # block (v0, log sigma2_u): the move rescales v1 so u1 stays at -0.2
    cfg, geom, data, state = tiny
    s = cfg.slices()
    ou, os2 = s["u"].start, s["sigma2_u"].start
    plan = BlockPlan([np.array([ou, os2])], [np.array([[1.0, 0.3], [0.3, 1.0]])],
                     [AdaptiveScale(-0.3, 0.23, rm_constant(0.23, 2), 28)], 0.0,
                     np.full(cfg.n_params, 0.5))
    r = stage2_run(state, data, geom, plan, 300_000, 3, 10_000, np.random.default_rng(4))
    assert np.all(r.draws[:, ou + 1] == pytest.approx(-0.2))
    l = np.log(r.draws[:, os2])
    ref = grid_mean_log_s2(cfg, geom, data, state, u1_fixed=-0.2)
    assert abs(l.mean() - ref) < 4 * batch_se(l) + 0.01


def test_gap_predecessors_link_adjacent_levels_of_one_row():
    cfg = ModelConfig((0.1, 0.5, 0.9), K=1, R=0)
    # Q[0,1], Q[0,2], Q[1,0], Q[1,1], Q[2,2], then beta0
    block = np.array([1, 2, 3, 4, 8, cfg.P * cfg.T])
    assert gap_predecessors(block, cfg).tolist() == [-1, 0, -1, 2, -1, -1]


def test_localize_plan_gap_steps_only_for_linked_quantiles():
    cfg = ModelConfig((0.1, 0.5, 0.9), K=1, R=0)
    rng = np.random.default_rng(0)
    n = cfg.n_params
    samples = rng.normal(size=(2000, n))
    samples[:, :cfg.P * cfg.T] = np.sort(samples[:, :cfg.P * cfg.T].reshape(-1, cfg.P, cfg.T),
                                         axis=2).reshape(2000, -1)
    plan = build_blocks(samples, 3)
    local = localize_plan(plan, np.zeros(n), cfg, samples)
    for b, g, C in zip(local.blocks, local.gap_scale, local.proposal_cov):
        linked = gap_predecessors(b, cfg) >= 0
        assert np.all((g > 0) == linked)
        assert C.shape == (len(b), len(b))


def test_log_gap_block_recovers_pyramid_prior():
    # one vertex row as a single block, no data, everything else fixed
    cfg = ModelConfig((0.1, 0.3, 0.5, 0.9), K=0, R=0)
    geom = build_geometry(cfg)
    state = initial_state(None, geom)
    T = cfg.T
    b = np.arange(T, 2 * T)
    rho = 0.5 * np.eye(T) + 0.5
    plan = BlockPlan([b], [rho], [AdaptiveScale(-0.5, 0.23, rm_constant(0.23, T), 28)], 0.0,
                     np.full(cfg.n_params, 0.7), [np.array([0.0, 0.6, 0.6, 0.6])])
    r = stage2_run(state, None, geom, plan, 200_000, 2, 10_000, np.random.default_rng(4))
    mu, sd = vertex_centring(state, geom)
    ref = sample_pyramid(geom.tree, (mu[1], sd[1]), np.random.default_rng(9), size=400_000)
    for t in range(T):
        q = r.draws[:, b[t]]
        assert abs(q.mean() - ref[:, t].mean()) < 4 * batch_se(q) + 0.01
        assert q.std() == pytest.approx(ref[:, t].std(), rel=0.06)
    np.testing.assert_array_equal(r.draws[:, 0:T], np.tile(state.Qp[0], (r.n_draws, 1)))


def test_quantile_updates_recover_pyramid_prior():
    # no data and a frozen centring: each pyramid row is a draw from its prior
    cfg = ModelConfig((0.1, 0.5, 0.9), K=0, R=0)
    geom = build_geometry(cfg)
    state = initial_state(None, geom)
    frozen = np.ones(cfg.n_params, bool)
    frozen[cfg.slices()["Qp"]] = False
    r = stage1_run(state, None, geom, 60_000, np.random.default_rng(8), burn_in=2000, frozen=frozen)
    Q = r.samples(cfg)[:, cfg.slices()["Qp"]].reshape(-1, cfg.P, cfg.T)
    mu, sd = vertex_centring(state, geom)
    for p in range(cfg.P):
        ref = sample_pyramid(geom.tree, (mu[p], sd[p]), np.random.default_rng(9 + p), size=200_000)
        for t in range(cfg.T):
            q = Q[:, p, t]
            assert abs(q.mean() - ref[:, t].mean()) < 4 * batch_se(q) + 0.01
            assert q.std() == pytest.approx(ref[:, t].std(), rel=0.08)


# ---------------------------------------------------------------------------
# end to end


def test_fit_small_run_is_deterministic_and_non_crossing():
    cfg, geom, data = small_problem(n=60)
    mcmc = MCMCConfig(iters1=1000, iters2=1500, burnin=500, thin=5, chunk=250)
    grid = np.linspace(0, 1, 101)
    a = fit(data, geom, mcmc, np.random.default_rng(3), grid=grid)
    b = fit(data, geom, mcmc, np.random.default_rng(3), grid=grid)
    np.testing.assert_array_equal(a.draws, b.draws)
    assert a.draws.shape == (200, cfg.n_params)
    assert np.all(np.diff(a.curve_draws(grid), axis=2) > 0)
    assert np.all(np.diff(a.summaries.mean, axis=1) > 0)
    assert np.all(a.summaries.lower <= a.summaries.upper)
    assert a.acceptance["stage1"].shape == (cfg.n_params,)
    assert len(a.acceptance["stage2"]) == len(a.plan.blocks)
    assert a.ess.shape == (cfg.n_params,)
    assert np.all(a.draws[:, cfg.slices()["sigma2_u"]] > 0)


def test_fit_rejects_impossible_start():
    cfg, geom, data = small_problem()
    state = initial_state(data, geom)
    state.Qp[0] = state.Qp[0][::-1]
    with pytest.raises(ValueError):
        fit(data, geom, MCMCConfig(iters1=10, iters2=10, burnin=5, thin=1), np.random.default_rng(0), state=state)

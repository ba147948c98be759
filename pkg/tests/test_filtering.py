"""Particle filter and truncated-grid oracle."""

import math
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest

import genfilter as gf
from genfilter.filtering import FilterConfig, FilterError


def lbdp(lam, delta, psi, n0, mu=1.0):
    return gf.lbdp_spec(gf.LBDPParams(lam, delta, psi, n0), mu=mu)


def sir(beta, gamma, psi, s0, i0, mu=1.0):
    return gf.sir_spec(gf.SIRParams(beta, gamma, psi, s0, i0), mu=mu)


def empty_visible(t_end):
    return gf.prune(replace(gf.new_genealogy(1), time=t_end))


def two_leaf_visible():
    # two roots, each sampled once; both individuals outlive the horizon
    g = gf.new_genealogy(2)
    g = gf.apply_sample(g, 0, 0.5)
    g = gf.apply_sample(g, 1, 0.6)
    return gf.prune(replace(g, time=1.0))


def direct_chain_visible():
    # one root sampled twice; second sample descends from the first
    g = gf.new_genealogy(1)
    g = gf.apply_sample(g, 0, 0.3)
    g = gf.apply_sample(g, 0, 0.7)
    return gf.prune(replace(g, time=1.0))


def coalescence_visible():
    # one root, a birth, then one sample on each branch
    g = gf.new_genealogy(1)
    g = gf.apply_birth(g, 0, 0.2)
    g = gf.apply_sample(g, 0, 0.4)
    g = gf.apply_sample(g, 1, 0.6)
    return gf.prune(replace(g, time=1.0))


def simulate_with_samples(spec, horizon, seed, lo, hi):
    rng = np.random.default_rng(seed)
    while True:
        traj = gf.simulate(spec, horizon, rng)
        k = sum(1 for j in traj.jumps if spec.events[j.event].is_sample)
        if lo <= k <= hi:
            return traj


# ---------------------------------------------------------------------------
# Configuration and schedule


def test_filter_config_validation():
    with pytest.raises(ValueError, match="n_particles"):
        FilterConfig(0)
    with pytest.raises(ValueError, match="ess_threshold"):
        FilterConfig(10, ess_threshold=1.5)
    with pytest.raises(ValueError, match="resampling"):
        FilterConfig(10, resampling="stratified")
    with pytest.raises(ValueError, match="weighting"):
        FilterConfig(10, weighting="bootstrap")


def test_event_schedule_kinds():
    assert gf.event_schedule(empty_visible(2.0)) == ()
    assert gf.event_schedule(two_leaf_visible()) == ((0.5, "leaf"), (0.6, "leaf"))
    assert gf.event_schedule(direct_chain_visible()) == (
        (0.3, "direct"), (0.7, "leaf"))
    assert gf.event_schedule(coalescence_visible()) == (
        (0.2, "coalescence"), (0.4, "leaf"), (0.6, "leaf"))


def test_event_schedule_rejects_unpruned():
    g = gf.apply_sample(gf.new_genealogy(1), 0, 0.5)
    with pytest.raises(FilterError, match="prune"):
        gf.event_schedule(replace(g, time=1.0))


def test_init_ensemble_projects_bookkeeping():
    rng = np.random.default_rng(0)
    ens = gf.init_ensemble(lbdp(1.0, 0.5, 0.2, 3), 50, rng)
    assert ens.states.shape == (50, 1)
    assert (ens.states == 3).all()
    assert (ens.log_weights == 0.0).all()

    ens = gf.init_ensemble(sir(0.1, 0.5, 0.2, 9, 2), 20, rng)
    assert ens.states.shape == (20, 3)
    assert (ens.states == np.array([9, 2, 0])).all()


# ---------------------------------------------------------------------------
# Interval propagation


def test_propagate_survival_weight_exact():
    # no birth or death, so the only weight is the sampling survival factor
    spec = lbdp(0.0, 0.0, 0.7, 2)
    ens = gf.init_ensemble(spec, 64, np.random.default_rng(1))
    out = gf.propagate_interval(spec, ens, two_leaf_visible(), 0.0, 0.4,
                                np.random.default_rng(2))
    assert (out.states == 2).all()
    assert np.allclose(out.log_weights, -0.7 * 2 * 0.4, rtol=0, atol=1e-12)


def test_propagate_rejection_mode_kills_sampled():
    spec = lbdp(0.0, 0.0, 0.7, 2)
    n = 4000
    ens = gf.init_ensemble(spec, n, np.random.default_rng(3))
    out = gf.propagate_interval(spec, ens, two_leaf_visible(), 0.0, 0.4,
                                np.random.default_rng(4), weighting="rejection")
    alive = np.isfinite(out.log_weights)
    assert (out.log_weights[alive] == 0.0).all()
    p = math.exp(-0.7 * 2 * 0.4)
    assert abs(alive.mean() - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_propagate_kills_deaths_below_lineage_count():
    # two tracked lineages, so any death of two individuals is incompatible
    spec = lbdp(0.0, 0.5, 0.0, 2)
    n = 4000
    ens = gf.init_ensemble(spec, n, np.random.default_rng(5))
    out = gf.propagate_interval(spec, ens, two_leaf_visible(), 0.0, 0.5,
                                np.random.default_rng(6))
    alive = np.isfinite(out.log_weights)
    assert (out.states[alive] == 2).all()
    assert (out.log_weights[alive] == 0.0).all()
    p = math.exp(-0.5 * 2 * 0.5)
    assert abs(alive.mean() - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_propagate_reweights_hidden_births():
    # every simulated birth pays the chance it was not a tracked coalescence
    spec = lbdp(1.0, 0.0, 0.0, 2)
    ens = gf.init_ensemble(spec, 500, np.random.default_rng(7))
    out = gf.propagate_interval(spec, ens, two_leaf_visible(), 0.0, 0.3,
                                np.random.default_rng(8))
    for size, logw in zip(out.states[:, 0], out.log_weights):
        want = sum(math.log(1.0 - 1.0 / (m * (m - 1) / 2.0))
                   for m in range(3, int(size) + 1))
        assert logw == pytest.approx(want, abs=1e-12)


def test_propagate_interval_validates():
    spec = lbdp(1.0, 0.5, 0.2, 2)
    ens = gf.init_ensemble(spec, 4, np.random.default_rng(9))
    with pytest.raises(ValueError, match="weighting"):
        gf.propagate_interval(spec, ens, two_leaf_visible(), 0.0, 0.1,
                              np.random.default_rng(9), weighting="exact")
    with pytest.raises(ValueError, match="t1"):
        gf.propagate_interval(spec, ens, two_leaf_visible(), 0.5, 0.1,
                              np.random.default_rng(9))


# ---------------------------------------------------------------------------
# Event updates


def test_event_update_coalescence_factor():
    # birth rate 1.5n against choose(n+1, 2) destination pairs
    spec = lbdp(1.5, 0.3, 0.6, 1)
    ens = gf.Ensemble(np.array([[2], [1], [0]], dtype=np.int64), np.zeros(3))
    out = gf.event_update(spec, ens, coalescence_visible(), 0.2, "coalescence",
                          np.random.default_rng(10))
    assert out.states[:2].tolist() == [[3], [2]]
    assert out.log_weights[0] == pytest.approx(0.0, abs=1e-15)
    assert out.log_weights[1] == pytest.approx(math.log(1.5), abs=1e-15)
    assert out.log_weights[2] == -math.inf
    assert out.states[2].tolist() == [0]


def test_event_update_direct_factor():
    # sampling rate psi*i against i equally likely carriers
    spec = sir(0.5, 0.4, 1.0, 5, 4)
    ens = gf.Ensemble(np.array([[5, 4, 0]], dtype=np.int64), np.zeros(1))
    out = gf.event_update(spec, ens, direct_chain_visible(), 0.3, "direct",
                          np.random.default_rng(11))
    assert out.states.tolist() == [[5, 4, 0]]
    assert out.log_weights[0] == pytest.approx(0.0, abs=1e-15)


def test_event_update_leaf_factor():
    # one lineage still open after the leaf: the sample must avoid it
    spec = sir(0.5, 0.4, 1.0, 5, 4)
    ens = gf.Ensemble(np.array([[5, 4, 0]], dtype=np.int64), np.zeros(1))
    out = gf.event_update(spec, ens, two_leaf_visible(), 0.5, "leaf",
                          np.random.default_rng(12))
    assert out.log_weights[0] == pytest.approx(math.log(4 * (1 - 1 / 4)), abs=1e-14)

    # no lineage open afterwards: only the rate-over-mu factor remains
    ens = gf.Ensemble(np.array([[5, 4, 0]], dtype=np.int64), np.zeros(1))
    out = gf.event_update(spec, ens, two_leaf_visible(), 0.6, "leaf",
                          np.random.default_rng(13))
    assert out.log_weights[0] == pytest.approx(math.log(4.0), abs=1e-14)


def test_event_update_keeps_dead_particles_dead():
    spec = lbdp(1.5, 0.3, 0.6, 1)
    ens = gf.Ensemble(np.array([[4], [4]], dtype=np.int64),
                      np.array([0.0, -np.inf]))
    out = gf.event_update(spec, ens, coalescence_visible(), 0.2, "coalescence",
                          np.random.default_rng(14))
    assert out.log_weights[1] == -math.inf
    assert out.states[1].tolist() == [4]


# ---------------------------------------------------------------------------
# Full filter runs


def test_smc_empty_schedule_is_certain():
    spec = lbdp(0.9, 0.4, 0.0, 1)
    res = gf.smc_loglik(spec, empty_visible(2.0), FilterConfig(200, seed=15))
    assert res.loglik == 0.0
    assert res.diagnostics.events == []
    assert not res.diagnostics.collapsed


def test_smc_pure_sampling_has_zero_variance():
    # with no birth or death every particle carries the exact likelihood
    psi, horizon = 0.8, 2.0
    spec = lbdp(0.0, 0.0, psi, 1)
    traj = simulate_with_samples(spec, horizon, 16, 2, 8)
    v = gf.prune(gf.build_genealogy(spec, traj)[0])
    k = len([n for n in v.nodes if n.time > 0])
    want = k * math.log(psi) - psi * horizon
    for seed in (17, 18):
        res = gf.smc_loglik(spec, v, FilterConfig(32, seed=seed))
        assert res.loglik == pytest.approx(want, abs=1e-10)
        assert not res.diagnostics.collapsed


def test_smc_seed_determinism():
    spec = lbdp(1.4, 0.5, 0.9, 1)
    traj = simulate_with_samples(spec, 2.0, 19, 2, 10)
    v = gf.prune(gf.build_genealogy(spec, traj)[0])
    a = gf.smc_loglik(spec, v, FilterConfig(300, seed=7))
    b = gf.smc_loglik(spec, v, FilterConfig(300, seed=7))
    c = gf.smc_loglik(spec, v, FilterConfig(300, seed=8))
    assert a.loglik == b.loglik
    assert a.diagnostics.events == b.diagnostics.events
    assert a.loglik != c.loglik


@lru_cache(maxsize=1)
def lbdp_case():
    params = gf.LBDPParams(1.5, 0.8, 1.0, 1)
    spec = gf.lbdp_spec(params)
    traj = simulate_with_samples(spec, 2.5, 20, 3, 8)
    v = gf.prune(gf.build_genealogy(spec, traj)[0])
    exact = gf.oracle_loglik(spec, v, gf.lbdp_truncation(params, 120))
    return spec, v, exact


def test_smc_matches_oracle():
    spec, v, exact = lbdp_case()
    rep = gf.replicate_loglik(spec, v, FilterConfig(2000, seed=21), 16)
    assert rep.collapse_count == 0
    assert abs(rep.mean - exact) <= 3 * rep.se


def test_smc_rejection_mode_matches_oracle():
    spec, v, exact = lbdp_case()
    rep = gf.replicate_loglik(
        spec, v, FilterConfig(4000, seed=22, weighting="rejection"), 16)
    assert rep.collapse_count == 0
    assert abs(rep.mean - exact) <= 3 * rep.se


def test_smc_multinomial_resampling_matches_oracle():
    spec, v, exact = lbdp_case()
    rep = gf.replicate_loglik(
        spec, v, FilterConfig(2000, seed=23, resampling="multinomial"), 16)
    assert rep.collapse_count == 0
    assert abs(rep.mean - exact) <= 3 * rep.se


def test_smc_likelihood_estimates_are_unbiased():
    # the unnormalized filter estimates the likelihood itself without bias,
    # so the mean of exp(loglik) over many replicates brackets the oracle
    spec, v, exact = lbdp_case()
    rep = gf.replicate_loglik(spec, v, FilterConfig(300, seed=29), 240)
    assert rep.collapse_count == 0
    liks = np.exp(np.array(rep.estimates))
    se = liks.std(ddof=1) / math.sqrt(len(liks))
    assert abs(liks.mean() - math.exp(exact)) <= 3 * se


def test_smc_impossible_genealogy_collapses():
    # no birth channel mass, so a coalescence cannot be explained
    spec = lbdp(0.0, 0.3, 0.6, 1)
    v = coalescence_visible()
    res = gf.smc_loglik(spec, v, FilterConfig(100, seed=24))
    assert res.loglik == -math.inf
    assert res.diagnostics.collapsed
    assert res.diagnostics.collapse_time == 0.2
    assert gf.oracle_loglik(spec, v, [(n, 0) for n in range(4)]) == -math.inf


def test_replicate_loglik_records_collapses():
    spec = lbdp(0.0, 0.3, 0.6, 1)
    rep = gf.replicate_loglik(spec, coalescence_visible(),
                              FilterConfig(50, seed=25), 5)
    assert rep.mean == -math.inf
    assert rep.collapse_count == 5
    assert math.isnan(rep.se)
    assert rep.estimates == (-math.inf,) * 5


def test_smc_resamples_on_threshold():
    spec, v, _ = lbdp_case()
    res = gf.smc_loglik(spec, v, FilterConfig(200, seed=26, ess_threshold=1.0))
    n_events = len(gf.event_schedule(v))
    assert len(res.diagnostics.events) == n_events
    assert res.diagnostics.resample_count == n_events
    assert all(row.resampled for row in res.diagnostics.events)
    assert all(0 < row.ess <= 200 for row in res.diagnostics.events)

    lazy = gf.smc_loglik(spec, v, FilterConfig(200, seed=26, ess_threshold=0.0))
    assert lazy.diagnostics.resample_count == 0


def test_diagnostics_csv(tmp_path):
    spec, v, _ = lbdp_case()
    res = gf.smc_loglik(spec, v, FilterConfig(100, seed=27))
    path = res.diagnostics.to_csv(tmp_path / "diag.csv", {"seed": 27})
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed: 27"
    assert lines[1] == "time,kind,log_mean_weight,ess,resampled"
    assert len(lines) == 2 + len(res.diagnostics.events)
    time, kind, lmw, ess, resampled = lines[2].split(",")
    assert kind in {"coalescence", "direct", "leaf"}
    assert math.isfinite(float(lmw))
    assert float(time) == res.diagnostics.events[0].time
    assert resampled in {"0", "1"}


# ---------------------------------------------------------------------------
# Grid oracle


def test_oracle_no_samples_conserves_mass():
    spec = lbdp(0.8, 0.3, 0.0, 2)
    ll, grid = gf.oracle_loglik(spec, empty_visible(1.2),
                                gf.lbdp_truncation(gf.LBDPParams(0.8, 0.3, 0.0, 2), 150),
                                return_grid=True)
    assert abs(ll) < 1e-6
    assert grid.time == 1.2
    assert grid.weights.sum() == pytest.approx(math.exp(ll), rel=1e-12)
    assert gf.boundary_flux(spec, grid, t=1.2) < 1e-8


def test_oracle_pure_sampling_anchor():
    psi = 0.8
    spec = lbdp(0.0, 0.0, psi, 1)
    g = gf.apply_sample(gf.new_genealogy(1), 0, 0.6)
    v = gf.prune(replace(g, time=1.5))
    ll = gf.oracle_loglik(spec, v, [(1, 0)])
    assert ll == pytest.approx(math.log(psi) - psi * 1.5, abs=1e-7)

    ll2 = gf.oracle_loglik(spec, direct_chain_visible(), [(1, 0)])
    assert ll2 == pytest.approx(2 * math.log(psi) - psi * 1.0, abs=1e-7)


def test_oracle_rejects_infeasible_initial_condition():
    # two lineages at time zero need at least two individuals
    spec = lbdp(0.0, 0.0, 0.5, 1)
    assert gf.oracle_loglik(spec, two_leaf_visible(), [(1, 0)]) == -math.inf


def test_boundary_flux_from_dict():
    spec = lbdp(0.8, 0.3, 0.5, 1)
    # sampling only moves the bookkeeping coordinate, so it never leaves
    assert gf.boundary_flux(spec, {(1,): 1.0}) == pytest.approx(1.1)
    # death from 2 lands on 1, inside the set; birth from 1 lands on 2
    flux = gf.boundary_flux(spec, {(1,): 0.5, (2,): 0.5})
    assert flux == pytest.approx(0.5 * 0.3 + 0.5 * 1.6)


# ---------------------------------------------------------------------------
# Time-varying rates


def test_smc_time_dependent_sir_matches_oracle():
    beta = gf.PiecewiseConstant((1.0,), (0.9, 0.3))
    params = gf.SIRParams(beta, 0.5, 0.6, 6, 2)
    spec = gf.sir_spec(params)
    traj = simulate_with_samples(spec, 2.0, 28, 2, 6)
    v = gf.prune(gf.build_genealogy(spec, traj)[0])
    exact = gf.oracle_loglik(spec, v, gf.sir_truncation(params))
    rep = gf.replicate_loglik(spec, v, FilterConfig(1500, seed=29), 12)
    assert rep.collapse_count == 0
    assert abs(rep.mean - exact) <= 3 * rep.se

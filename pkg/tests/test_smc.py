import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import poisson

from mttem import FilterCollapseError, InvalidParameterError, StructuralError
from mttem.kalman import GaussianMoments, predict
from mttem.simulator import simulate
from mttem.smc import (
    Particle, ParticleSet, SMCConfig, birth_death_logprior, ess, propose_step, run_filter,
    scan_constant, systematic_resample,
)

from oracles import scan_loglik
from scenarios import THETA_STAR

MODEL = THETA_STAR.to_model()


def test_ess_extremes():
    assert ess(np.full(8, 1 / 8)) == pytest.approx(8)
    assert ess(np.eye(5)[2]) == pytest.approx(1)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(1, 40), u=st.floats(0, 0.999999))
def test_systematic_resampling_counts(seed, n, u):
    w = np.random.default_rng(seed).random(n) + 1e-3
    w /= w.sum()
    anc = systematic_resample(w, u)
    counts = np.bincount(anc, minlength=n)
    assert counts.sum() == n
    assert np.all(counts >= np.floor(n * w) - 1e-9)
    assert np.all(counts <= np.ceil(n * w) + 1e-9)
    assert np.all(np.diff(anc) >= 0)


def test_config_validation():
    for kw in (dict(N=0), dict(L=0), dict(ess_threshold=0.0), dict(fixed_k=-1)):
        with pytest.raises(InvalidParameterError):
            SMCConfig(**kw)


def test_clutter_only_likelihood_is_exact():
    th = dataclasses.replace(THETA_STAR, lambda_b=0.0)
    scans, _ = simulate(th, 30, 4)
    pset = run_filter(scans, th, SMCConfig(N=3), seed=0)
    ref = sum(poisson.logpmf(s.k_y, 10.0) - s.k_y * math.log(200.0 ** 2) for s in scans)
    assert pset.log_norm_const == pytest.approx(ref, rel=1e-12)
    for s in scans[:3]:
        assert scan_constant(th.to_model(), s.k_y) == pytest.approx(
            poisson.logpmf(s.k_y, 10.0) - s.k_y * math.log(200.0 ** 2))


def _scan(points):
    return np.asarray(points, dtype=float).reshape(-1, 2)


@pytest.mark.parametrize("k_b,points", [
    (0, [[3.0, 1.0]]),
    (1, [[1.0, -2.0], [50.0, 50.0]]),
    (2, [[1.0, -2.0], [-4.0, 3.0], [70.0, -20.0]]),
    (3, [[0.5, 0.5], [2.0, 2.0]]),
])
def test_known_births_increment_matches_enumeration(k_b, points):
    Y = _scan(points)
    pset = ParticleSet(SMCConfig(N=1, L=500), seed=0)
    ll = pset.step(Y, MODEL, known=(np.zeros(0, bool), k_b))
    g = MODEL.glssm
    ref = scan_loglik(MODEL, [g.mu_b] * k_b, [g.Sigma_b] * k_b, Y)
    assert ll - birth_death_logprior(MODEL, [], k_b) == pytest.approx(ref, rel=1e-10)


def test_second_step_increment_matches_enumeration():
    g = MODEL.glssm
    pset = ParticleSet(SMCConfig(N=1, L=500), seed=1)
    pset.step(_scan([[1.0, 1.0], [-3.0, 2.0]]), MODEL, known=(np.zeros(0, bool), 2))
    preds = [predict(GaussianMoments(m, S), g) for m, S in zip(pset.bank.mu, pset.bank.Sigma)]
    Y = _scan([[1.5, 0.5], [-2.0, 2.5], [30.0, 0.0]])
    ll = pset.step(Y, MODEL, known=(np.ones(2, bool), 0))
    ref = scan_loglik(MODEL, [p.mu for p in preds], [p.Sigma for p in preds], Y)
    prior = birth_death_logprior(MODEL, np.ones(2, bool), 0)
    assert ll - prior == pytest.approx(ref, rel=1e-10)


def test_truncated_l_best_underestimates():
    Y = _scan([[1.0, -2.0], [-4.0, 3.0], [2.0, 2.0]])
    full = ParticleSet(SMCConfig(N=1, L=500), seed=0).step(Y, MODEL, known=([], 3))
    one = ParticleSet(SMCConfig(N=1, L=1), seed=0).step(Y, MODEL, known=([], 3))
    assert one < full


@pytest.mark.slow
def test_one_step_estimate_matches_marginal():
    th = dataclasses.replace(THETA_STAR, lambda_b=1.0).to_model()
    g = th.glssm
    Y = _scan([[1.0, -2.0], [-4.0, 3.0], [60.0, 10.0]])
    ref = math.log(sum(
        poisson.pmf(k, 1.0) * math.exp(scan_loglik(th, [g.mu_b] * k, [g.Sigma_b] * k, Y))
        for k in range(9)))
    pset = ParticleSet(SMCConfig(N=10_000, L=300), seed=5)
    est = pset.step(Y, th)
    rel_sd = math.sqrt((pset.N / ess(pset.weights) - 1) / pset.N)
    assert abs(est - ref) < 4 * rel_sd + 1e-3


def test_same_seed_same_filter():
    scans, _ = simulate(THETA_STAR, 25, 2)
    a = run_filter(scans, THETA_STAR, SMCConfig(N=30), seed=9)
    b = run_filter(scans, THETA_STAR, SMCConfig(N=30), seed=9)
    c = run_filter(scans, THETA_STAR, SMCConfig(N=30), seed=10)
    assert a.log_norm_const == b.log_norm_const
    np.testing.assert_array_equal(a.k_x, b.k_x)
    np.testing.assert_array_equal(a.logw, b.logw)
    assert a.log_norm_const != c.log_norm_const


def test_weights_stay_normalised():
    scans, _ = simulate(THETA_STAR, 20, 3)
    pset = ParticleSet(SMCConfig(N=40), seed=0)
    for s in scans:
        pset.step(s, MODEL)
        assert pset.weights.sum() == pytest.approx(1.0)
        assert 1.0 <= ess(pset.weights) <= pset.N + 1e-9


def test_impossible_births_collapse():
    th = dataclasses.replace(THETA_STAR, lambda_b=0.0)
    pset = ParticleSet(SMCConfig(N=5), seed=0)
    with pytest.raises(FilterCollapseError):
        pset.step(_scan([[0.0, 0.0]]), th, known=([], 1))


def test_clutter_free_scan_explained_by_targets():
    th = dataclasses.replace(THETA_STAR, lambda_f=0.0, p_d=0.95).to_model()
    g = th.glssm
    Y = _scan([[1.0, 2.0], [-3.0, 0.5]])
    ll = ParticleSet(SMCConfig(N=1, L=20), seed=0).step(Y, th, known=([], 2))
    ref = scan_loglik(th, [g.mu_b] * 2, [g.Sigma_b] * 2, Y)
    assert ll - birth_death_logprior(th, [], 2) == pytest.approx(ref, rel=1e-9)


def test_fixed_k_keeps_population():
    th = dataclasses.replace(THETA_STAR, p_s=1.0, lambda_b=0.0)
    from mttem.simulator import simulate_fixed_k
    scans, _ = simulate_fixed_k(th, 3, 15, 1)
    pset = run_filter(scans, th, SMCConfig(N=20, fixed_k=3), seed=0)
    assert (pset.k_x == 3).all()


def test_known_birth_death_requires_equal_counts():
    pset = ParticleSet(SMCConfig(N=4), seed=0)
    pset.step(_scan([]), MODEL, known=([], 2))
    assert (pset.k_x == 2).all()
    pset.step(_scan([]), MODEL, known=([1, 0], 1))
    assert (pset.k_x == 2).all()
    with pytest.raises(StructuralError):
        pset.step(_scan([]), MODEL, known=([1], 0))


def test_resample_below_threshold_only():
    pset = ParticleSet(SMCConfig(N=4, ess_threshold=0.5), seed=0)
    np.testing.assert_array_equal(pset.resample(), np.arange(4))
    pset.logw = np.log([0.97, 0.01, 0.01, 0.01])
    pi = pset.resample(u=0.1)
    np.testing.assert_array_equal(pi, [0, 0, 0, 0])
    np.testing.assert_allclose(pset.weights, 0.25)


def test_records_are_consistent():
    scans, _ = simulate(THETA_STAR, 10, 8)
    pset = ParticleSet(SMCConfig(N=10), seed=0)
    for s in scans:
        pset.step(s, MODEL)
        for i in range(pset.N):
            r = pset.record(i)
            assert r["c_d"].size == pset.k_x[i]
            assert r["k_f"] + r["c_d"].sum() == s.k_y
            assert np.unique(r["a"]).size == r["a"].size


def test_propose_step_single_particle():
    rng = np.random.default_rng(0)
    p = Particle.empty()
    Y = _scan([[1.0, 1.0], [5.0, -5.0]])
    new, incr = propose_step(p, Y, MODEL, 10, rng)
    assert p.k_x == 0
    new.record.validate(k_prev=0, k_y=2)
    assert new.k_x == new.record.k_x
    assert new.log_weight == incr
    g = MODEL.glssm
    k = new.record.k_b
    assert incr == pytest.approx(scan_loglik(MODEL, [g.mu_b] * k, [g.Sigma_b] * k, Y), rel=1e-10)

import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mttem import InvalidParameterError
from mttem.model import (
    CV_FIELDS, CostModelConstants, CvParams, GlssmParams, ModelParams, cv_assemble,
    cv_assemble_stationary, cv_extract, expected_complete_loglik, expected_smc_cost,
    lambda_mstep, stationary_rates,
)
from mttem.simulator import simulate
from mttem.smoothing import SufficientStatSet

from oracles import complete_data_stats, q_oracle
from scenarios import THETA_STAR


def _stats(d):
    return SufficientStatSet.from_parts(*[d[f"S{m}"] for m in range(1, 16)])


@pytest.fixture(scope="module")
def complete():
    scans, truth = simulate(THETA_STAR, 150, 3)
    return complete_data_stats(truth, scans)


# ------------------------------------------------------------ containers

def test_cv_assemble_block_structure():
    m = cv_assemble(dataclasses.replace(THETA_STAR, delta=1.0))
    g = m.glssm
    np.testing.assert_array_equal(g.V, 4 * np.eye(2))
    assert g.F[0, 2] == 1.0 and g.F[1, 3] == 1.0
    np.testing.assert_array_equal(g.G, np.hstack([np.eye(2), np.zeros((2, 2))]))
    np.testing.assert_array_equal(np.diag(g.W), [0, 0, 0.0625, 0.0625])


def test_zero_time_step_gives_identity_transition():
    g = cv_assemble(dataclasses.replace(THETA_STAR, delta=0.0)).glssm
    np.testing.assert_array_equal(g.F, np.eye(4))


def test_unit_variances_give_identity_birth_covariance():
    cv = dataclasses.replace(THETA_STAR, sigma_bp2=1, sigma_bv2=1, mu_bx=0, mu_by=0)
    g = cv_assemble(cv).glssm
    np.testing.assert_array_equal(g.Sigma_b, np.eye(4))
    np.testing.assert_array_equal(g.mu_b, np.zeros(4))


def test_stationary_variant():
    g = cv_assemble_stationary(THETA_STAR, 0.99).glssm
    np.testing.assert_array_equal(np.diag(g.F), [0.99] * 4)
    a, b = cv_assemble_stationary(THETA_STAR, 1.0), cv_assemble(THETA_STAR)
    for name in ("F", "G", "W", "V", "mu_b", "Sigma_b"):
        np.testing.assert_array_equal(getattr(a.glssm, name), getattr(b.glssm, name))
    g = cv_assemble_stationary(dataclasses.replace(THETA_STAR, delta=0.0), 0.5).glssm
    np.testing.assert_array_equal(g.F, 0.5 * np.eye(4))


@pytest.mark.parametrize("rho", [0.0, -0.1, 1.01])
def test_stationary_rejects_bad_rho(rho):
    with pytest.raises(InvalidParameterError):
        cv_assemble_stationary(THETA_STAR, rho)


def test_negative_variance_rejected():
    with pytest.raises(InvalidParameterError):
        dataclasses.replace(THETA_STAR, sigma_y2=-1.0)


def test_model_params_validation():
    g = cv_assemble(THETA_STAR).glssm
    with pytest.raises(InvalidParameterError):
        ModelParams(g, p_s=1.2, p_d=0.5, lambda_b=1, lambda_f=1)
    with pytest.raises(InvalidParameterError):
        ModelParams(g, p_s=0.5, p_d=0.5, lambda_b=-1, lambda_f=1)
    with pytest.raises(InvalidParameterError):
        GlssmParams(mu_b=np.zeros(4), Sigma_b=np.eye(4), F=np.eye(4), G=np.eye(2, 4),
                    W=np.eye(3), V=np.eye(2))
    with pytest.raises(InvalidParameterError):
        GlssmParams(mu_b=np.zeros(4), Sigma_b=-np.eye(4), F=np.eye(4), G=np.eye(2, 4),
                    W=np.eye(4), V=np.eye(2))
    assert ModelParams(g, 0.5, 0.5, 1, 1, kappa=100).region_volume == 200.0 ** 2


def test_glssm_arrays_are_frozen():
    g = cv_assemble(THETA_STAR).glssm
    with pytest.raises(ValueError):
        g.F[0, 0] = 3.0


def test_json_round_trip_and_keys():
    d = json.loads(THETA_STAR.to_json())
    assert list(d) == list(CV_FIELDS) + ["delta", "kappa", "rho"]
    assert CvParams.from_json(THETA_STAR.to_json()) == THETA_STAR
    d.pop("rho")
    assert CvParams.from_dict(d).rho == 1.0
    with pytest.raises(InvalidParameterError):
        CvParams.from_dict({**d, "extra": 1})
    d.pop("p_d")
    with pytest.raises(InvalidParameterError):
        CvParams.from_dict(d)


variances = st.floats(0.0, 1e3)


@settings(max_examples=60, deadline=None)
@given(bp=variances, bv=variances, xv=variances, y=variances, rho=st.floats(0.01, 1.0),
       delta=st.floats(0.0, 5.0))
def test_assemble_extract_round_trip(bp, bv, xv, y, rho, delta):
    cv = dataclasses.replace(THETA_STAR, sigma_bp2=bp, sigma_bv2=bv, sigma_xv2=xv,
                             sigma_y2=y, rho=rho, delta=delta)
    assert cv_extract(cv_assemble(cv)) == cv


# ------------------------------------------------------------ M-step

def test_mstep_direct_ratios(complete):
    d = dict(complete, S9=90.0, S10=100.0, S13=20.0, S15=100.0)
    new = lambda_mstep(_stats(d), THETA_STAR)
    assert new.p_d == pytest.approx(0.9)
    assert new.lambda_b == pytest.approx(0.2)


def test_mstep_holds_position_noise_and_held_params(complete):
    prev = dataclasses.replace(THETA_STAR, sigma_xp2=0.3)
    new = lambda_mstep(_stats(complete), prev, hold=("p_s", "mu_bx"))
    assert new.sigma_xp2 == 0.3
    assert new.p_s == prev.p_s and new.mu_bx == prev.mu_bx
    assert new.p_d != prev.p_d


def test_mstep_degenerate_denominators_keep_previous(complete):
    d = dict(complete, S13=0.0, S15=0.0, S6=np.zeros(4), S7=np.zeros((4, 4)))
    new = lambda_mstep(_stats(d), THETA_STAR)
    for name in ("lambda_b", "lambda_f", "mu_bx", "mu_by", "sigma_bp2", "sigma_bv2"):
        assert getattr(new, name) == getattr(THETA_STAR, name)


def test_mstep_clamps_probabilities(complete):
    d = dict(complete, S9=complete["S10"], S11=0.0)
    new = lambda_mstep(_stats(d), THETA_STAR)
    assert new.p_d == 1 - 1e-6
    assert new.p_s == 1e-6


def test_mstep_overrides_select_stat_set(complete):
    other = dict(complete, S9=10.0, S10=100.0)
    new = lambda_mstep(_stats(complete), THETA_STAR, overrides={"p_d": _stats(other)})
    assert new.p_d == pytest.approx(0.1)
    base = lambda_mstep(_stats(complete), THETA_STAR)
    assert new.lambda_f == base.lambda_f


def test_mstep_complete_data_counts(complete):
    new = lambda_mstep(_stats(complete), THETA_STAR)
    assert new.p_d == pytest.approx(complete["S9"] / complete["S10"])
    assert new.p_s == pytest.approx(complete["S11"] / complete["S12"])
    assert new.lambda_f == pytest.approx(complete["S14"] / complete["S15"])


def test_mstep_beats_perturbations_on_single_target(rng):
    # one fully detected target, complete data
    from mttem.simulator import simulate_fixed_k
    th = dataclasses.replace(THETA_STAR, p_d=1 - 1e-6)
    scans, truth = simulate_fixed_k(th, 1, 200, 5)
    S = complete_data_stats(truth, scans)
    S.update(S11=S["S11"] + 3, S12=S["S12"] + 4, S13=S["S13"] + 2, S15=S["S15"])
    new = lambda_mstep(_stats(S), THETA_STAR)
    p = {k: getattr(new, k) for k in CV_FIELDS}
    best = q_oracle(S, p)
    names = [k for k in CV_FIELDS if k != "sigma_xp2"]
    for _ in range(1000):
        pert = {k: v * (1 + rng.uniform(-0.1, 0.1)) if k in names else v for k, v in p.items()}
        pert["p_d"] = min(pert["p_d"], 1 - 1e-9)
        pert["p_s"] = min(pert["p_s"], 1 - 1e-9)
        assert q_oracle(S, pert) <= best + 1e-9 * abs(best)


def test_q_function_matches_oracle(complete):
    S = _stats(complete)
    base = expected_complete_loglik(S, THETA_STAR)
    other = expected_complete_loglik(S, dataclasses.replace(THETA_STAR, sigma_y2=5.0))
    p0 = {k: getattr(THETA_STAR, k) for k in CV_FIELDS}
    # differences are free of the dropped constants
    assert other - base == pytest.approx(
        q_oracle(complete, {**p0, "sigma_y2": 5.0}) - q_oracle(complete, p0), rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(scale=st.floats(0.0, 3.0), seed=st.integers(0, 10))
def test_mstep_output_always_valid(scale, seed):
    scans, truth = simulate(THETA_STAR, 20, seed)
    S = complete_data_stats(truth, scans)
    S = {k: v * scale for k, v in S.items()}
    new = lambda_mstep(_stats(S), THETA_STAR)
    assert isinstance(new, CvParams)
    assert 0 < new.p_d < 1 and 0 < new.p_s < 1
    assert new.lambda_f > 0


# ------------------------------------------------------------ cost model

def test_stationary_rates():
    lam_x, lam_y = stationary_rates(THETA_STAR)
    assert lam_x == pytest.approx(4.0)
    assert lam_y == pytest.approx(4.0 * 1.9 + 10)
    with pytest.raises(InvalidParameterError):
        stationary_rates(dataclasses.replace(THETA_STAR, p_s=1.0))


def test_cost_zero_particles():
    assert expected_smc_cost(THETA_STAR, CostModelConstants(N=0)) == 0.0


def test_poisson_third_moment_term(rng):
    # lambda_y = 2 with p_d = 0, lambda_f = 2; only the L-term is active
    th = dataclasses.replace(THETA_STAR, lambda_b=0.0, lambda_f=2.0, p_d=0.0)
    c = CostModelConstants(c=(0, 0, 0, 0, 0, 1, 0, 0, 0), L=1, N=1)
    assert expected_smc_cost(th, c) == pytest.approx(22.0)
    assert np.mean(rng.poisson(2.0, 400_000).astype(float) ** 3) == pytest.approx(22.0, rel=0.02)


@pytest.mark.parametrize("field,values", [
    ("N", [0, 1, 10, 100]), ("L", [0, 1, 5, 10]),
])
def test_cost_monotone_in_sizes(field, values):
    costs = [expected_smc_cost(THETA_STAR, CostModelConstants(**{field: v})) for v in values]
    assert np.all(np.diff(costs) >= 0)


@pytest.mark.parametrize("field", ["lambda_b", "lambda_f"])
def test_cost_monotone_in_rates(field):
    costs = [expected_smc_cost(dataclasses.replace(THETA_STAR, **{field: v}))
             for v in (0.0, 0.1, 1.0, 5.0)]
    assert np.all(np.diff(costs) >= 0)


def test_cost_constants_validated():
    with pytest.raises(InvalidParameterError):
        CostModelConstants(c=(1,) * 8)
    with pytest.raises(InvalidParameterError):
        CostModelConstants(N=-1)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mttem import NumericalError
from mttem.kalman import (
    GaussianMoments, backward_params, predict, predictive_loglik, predictive_loglik_matrix,
    update,
)
from mttem.model import GlssmParams

from oracles import joint_posterior, random_glssm, simulate_track


def _psi(d):
    return GlssmParams(**d)


def _spd(rng, d):
    A = rng.normal(size=(d, d))
    return A @ A.T / d + 0.3 * np.eye(d)


def _scalar(F=1.0, G=1.0, W=0.0, V=1.0):
    return GlssmParams(mu_b=[0.0], Sigma_b=[[1.0]], F=[[F]], G=[[G]], W=[[W]], V=[[V]])


def _check_cov(S):
    np.testing.assert_allclose(S, S.T, atol=1e-12)
    assert np.linalg.eigvalsh(S).min() >= -1e-10


# ------------------------------------------------------------ predict

def test_predict_identity():
    psi = GlssmParams(mu_b=np.zeros(2), Sigma_b=np.eye(2), F=np.eye(2), G=np.eye(2),
                      W=np.zeros((2, 2)), V=np.eye(2))
    f = GaussianMoments(np.array([1.0, -2.0]), np.array([[2.0, 0.3], [0.3, 1.0]]))
    p = predict(f, psi)
    np.testing.assert_array_equal(p.mu, f.mu)
    np.testing.assert_array_equal(p.Sigma, f.Sigma)


def test_predict_adds_process_noise():
    psi = GlssmParams(mu_b=np.zeros(2), Sigma_b=np.eye(2), F=np.eye(2), G=np.eye(2),
                      W=np.eye(2), V=np.eye(2))
    p = predict(GaussianMoments(np.zeros(2), np.eye(2)), psi)
    np.testing.assert_array_equal(p.mu, np.zeros(2))
    np.testing.assert_array_equal(p.Sigma, 2 * np.eye(2))


def test_predict_matches_monte_carlo(rng):
    psi = _psi(random_glssm(rng))
    f = GaussianMoments(rng.normal(size=4), _spd(rng, 4))
    n = 1_000_000
    x = rng.multivariate_normal(f.mu, f.Sigma, size=n)
    x = x @ psi.F.T + rng.multivariate_normal(np.zeros(4), psi.W, size=n)
    p = predict(f, psi)
    se = np.sqrt(np.diag(p.Sigma) / n)
    assert np.all(np.abs(x.mean(0) - p.mu) < 3 * se + 1e-12)
    emp = np.cov(x.T)
    # standard error of a sample covariance entry: sqrt((S_ii S_jj + S_ij^2) / n)
    d = np.diag(p.Sigma)
    se_c = np.sqrt((np.outer(d, d) + p.Sigma ** 2) / n)
    assert np.all(np.abs(emp - p.Sigma) < 3.5 * se_c)


# ------------------------------------------------------------ update

def test_missed_detection_is_identity(rng):
    psi = _psi(random_glssm(rng))
    f = GaussianMoments(rng.normal(size=4), _spd(rng, 4))
    out, ll = update(f, None, psi)
    assert out is f and ll == 0.0


def test_scalar_update_by_hand():
    out, ll = update(GaussianMoments(np.array([0.0]), np.array([[1.0]])), [2.0], _scalar())
    assert out.mu[0] == pytest.approx(1.0)
    assert out.Sigma[0, 0] == pytest.approx(0.5)
    assert ll == pytest.approx(-0.5 * math.log(2 * math.pi * 2) - 4 / 4)


def test_update_matches_joint_conditioning(rng):
    for _ in range(10):
        psi = _psi(random_glssm(rng))
        mu, S = rng.normal(size=4), _spd(rng, 4)
        y = rng.normal(size=2) * 3
        out, ll = update(GaussianMoments(mu, S), y, psi)
        # joint of (x, y) and conditioning via the block inverse
        J = np.block([[S, S @ psi.G.T], [psi.G @ S, psi.G @ S @ psi.G.T + psi.V]])
        P = np.linalg.inv(J)
        Pxx, Pxy = P[:4, :4], P[:4, 4:]
        cov = np.linalg.inv(Pxx)
        mean = mu - cov @ Pxy @ (y - psi.G @ mu)
        np.testing.assert_allclose(out.mu, mean, rtol=1e-9, atol=1e-10)
        np.testing.assert_allclose(out.Sigma, cov, rtol=1e-9, atol=1e-10)
        _check_cov(out.Sigma)
        Gam = J[4:, 4:]
        r = y - psi.G @ mu
        ref = -0.5 * (2 * math.log(2 * math.pi) + np.linalg.slogdet(Gam)[1]
                      + r @ np.linalg.solve(Gam, r))
        assert ll == pytest.approx(ref, rel=1e-10)


def test_update_rejects_singular_innovation():
    psi = _scalar(V=0.0)
    with pytest.raises(NumericalError):
        update(GaussianMoments(np.array([0.0]), np.array([[0.0]])), [1.0], psi)


def test_update_rejects_wrong_dimension(rng):
    psi = _psi(random_glssm(rng))
    with pytest.raises(ValueError):
        update(GaussianMoments(np.zeros(4), np.eye(4)), np.zeros(3), psi)


# ------------------------------------------------------------ backward kernel

def test_backward_uninformative_future(rng):
    psi = GlssmParams(**{**random_glssm(rng), "W": 1e8 * np.eye(4)})
    f = GaussianMoments(rng.normal(size=4), _spd(rng, 4))
    bp = backward_params(f, psi)
    assert np.abs(bp.B).max() < 1e-6
    np.testing.assert_allclose(bp.b, f.mu, atol=1e-6)


def test_backward_deterministic_dynamics(rng):
    psi = GlssmParams(mu_b=np.zeros(4), Sigma_b=np.eye(4), F=np.eye(4), G=np.eye(2, 4),
                      W=np.zeros((4, 4)), V=np.eye(2))
    f = GaussianMoments(rng.normal(size=4), _spd(rng, 4))
    bp = backward_params(f, psi)
    np.testing.assert_allclose(bp.B, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(bp.b, 0, atol=1e-12)
    np.testing.assert_allclose(bp.Sigma_cross, 0, atol=1e-12)


def test_backward_matches_joint_conditioning(rng):
    for _ in range(10):
        psi = _psi(random_glssm(rng))
        mu, S = rng.normal(size=4), _spd(rng, 4)
        bp = backward_params(GaussianMoments(mu, S), psi)
        C = psi.F @ S @ psi.F.T + psi.W
        cross = S @ psi.F.T
        B = cross @ np.linalg.inv(C)
        np.testing.assert_allclose(bp.B, B, rtol=1e-9, atol=1e-11)
        np.testing.assert_allclose(bp.b, mu - B @ psi.F @ mu, rtol=1e-9, atol=1e-11)
        np.testing.assert_allclose(bp.Sigma_cross, S - B @ cross.T, rtol=1e-9, atol=1e-11)
        _check_cov(bp.Sigma_cross)


def test_backward_singular_prediction():
    psi = _scalar(F=0.0, W=0.0)
    with pytest.raises(NumericalError):
        backward_params(GaussianMoments(np.array([0.0]), np.array([[1.0]])), psi)


def test_rts_smoother_matches_joint(rng):
    for _ in range(5):
        d = random_glssm(rng)
        psi = _psi(d)
        x, c, y = simulate_track(rng, d, 10)
        filt, bps = [], []
        pred = GaussianMoments(psi.mu_b, psi.Sigma_b)
        for t in range(10):
            f, _ = update(pred, y[t] if c[t] else None, psi)
            filt.append(f)
            bps.append(backward_params(f, psi))
            pred = predict(f, psi)
        m = [None] * 10
        m[9] = filt[9].mu
        for t in range(8, -1, -1):
            m[t] = bps[t].B @ m[t + 1] + bps[t].b
        ref, _ = joint_posterior(d, c, y)
        np.testing.assert_allclose(np.array(m), ref, rtol=1e-8, atol=1e-10)


# ------------------------------------------------------------ predictive likelihood

def test_predictive_at_mean():
    psi = GlssmParams(mu_b=np.zeros(4), Sigma_b=np.eye(4), F=np.eye(4),
                      G=np.hstack([np.eye(2), np.zeros((2, 2))]), W=np.eye(4),
                      V=0.5 * np.eye(2))
    pred = GaussianMoments(np.array([1.0, 2.0, 0.0, 0.0]), np.diag([0.5, 0.5, 1.0, 1.0]))
    assert predictive_loglik(pred, [1.0, 2.0], psi) == pytest.approx(-math.log(2 * math.pi))


def test_predictive_matches_update(rng):
    psi = _psi(random_glssm(rng))
    pred = GaussianMoments(rng.normal(size=4), _spd(rng, 4))
    y = rng.normal(size=2)
    assert predictive_loglik(pred, y, psi) == pytest.approx(update(pred, y, psi)[1], rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(mu=st.floats(-3, 3), s=st.floats(0.1, 4), v=st.floats(0.1, 4), g=st.floats(-2, 2),
       y=st.floats(-5, 5))
def test_predictive_matches_quadrature(mu, s, v, g, y):
    psi = _scalar(G=g, V=v)
    xs = np.linspace(mu - 12 * math.sqrt(s), mu + 12 * math.sqrt(s), 20001)
    f = (np.exp(-0.5 * (y - g * xs) ** 2 / v) / math.sqrt(2 * math.pi * v)
         * np.exp(-0.5 * (xs - mu) ** 2 / s) / math.sqrt(2 * math.pi * s))
    ref = math.log(np.trapezoid(f, xs))
    got = predictive_loglik(GaussianMoments(np.array([mu]), np.array([[s]])), [y], psi)
    assert got == pytest.approx(ref, rel=1e-6, abs=1e-8)


def test_loglik_matrix_matches_pairwise(rng):
    psi = _psi(random_glssm(rng))
    mus = rng.normal(size=(3, 4))
    Sig = np.stack([_spd(rng, 4) for _ in range(3)])
    Y = rng.normal(size=(5, 2))
    M = predictive_loglik_matrix(mus, Sig, Y, psi.G, psi.V)
    assert M.shape == (3, 5)
    for i in range(3):
        for j in range(5):
            assert M[i, j] == pytest.approx(
                predictive_loglik(GaussianMoments(mus[i], Sig[i]), Y[j], psi), rel=1e-12)

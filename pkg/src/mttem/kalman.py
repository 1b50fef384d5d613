"""Kalman prediction/update, backward kernels and predictive likelihoods.

All functions broadcast over leading dimensions: ``mu`` has shape
``(..., dx)`` and ``Sigma`` has shape ``(..., dx, dx)``, so a whole bank of
targets is processed in one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import NumericalError

_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class GaussianMoments:
    mu: np.ndarray
    Sigma: np.ndarray


@dataclass(frozen=True, eq=False)
class BackwardParams:
    """Backward kernel ``x_t | x_{t+1} ~ N(B x_{t+1} + b, Sigma_cross)``."""

    B: np.ndarray
    b: np.ndarray
    Sigma_cross: np.ndarray


def symmetrize(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _chol(A, what):
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc


def _logdet_from_chol(Lc):
    return 2.0 * np.log(np.diagonal(Lc, axis1=-2, axis2=-1)).sum(-1)


def predict_arrays(mu, Sigma, F, W):
    mu_p = mu @ F.T
    Sigma_p = symmetrize(F @ Sigma @ F.T + W)
    return mu_p, Sigma_p


def innovation_arrays(mu, Sigma, G, V):
    """Predicted observation mean and covariance ``(G mu, G Sigma G' + V)``."""
    return mu @ G.T, symmetrize(G @ Sigma @ G.T + V)


def gaussian_loglik(y, m, S):
    """``log N(y; m, S)`` broadcast over leading dimensions of ``m`` and ``S``."""
    Lc = _chol(S, "innovation covariance")
    r = np.asarray(y, dtype=float) - m
    z = np.linalg.solve(Lc, r[..., None])[..., 0]
    d = S.shape[-1]
    return -0.5 * (d * _LOG2PI + _logdet_from_chol(Lc) + (z * z).sum(-1))


def update_arrays(mu, Sigma, y, G, V):
    """Measurement update of a batch; every row of ``y`` is observed.

    Returns ``(mu_f, Sigma_f, loglik)``.
    """
    m, S = innovation_arrays(mu, Sigma, G, V)
    Lc = _chol(S, "innovation covariance")
    SGt = Sigma @ G.T
    # gain K = Sigma G' S^{-1}
    K = np.swapaxes(np.linalg.solve(S, np.swapaxes(SGt, -1, -2)), -1, -2)
    r = y - m
    mu_f = mu + (K @ r[..., None])[..., 0]
    Sigma_f = symmetrize(Sigma - K @ np.swapaxes(SGt, -1, -2))
    z = np.linalg.solve(Lc, r[..., None])[..., 0]
    ll = -0.5 * (S.shape[-1] * _LOG2PI + _logdet_from_chol(Lc) + (z * z).sum(-1))
    return mu_f, Sigma_f, ll


def backward_arrays(mu, Sigma, F, W):
    """Backward kernel parameters ``(B, b, Sigma_cross)`` for a batch."""
    P = symmetrize(F @ Sigma @ F.T + W)
    _chol(P, "predictive covariance")
    # B' = P^{-1} F Sigma
    Bt = np.linalg.solve(P, F @ Sigma)
    B = np.swapaxes(Bt, -1, -2)
    I = np.eye(F.shape[0])
    IBF = I - B @ F
    b = (IBF @ mu[..., None])[..., 0]
    Sc = symmetrize(IBF @ Sigma)
    return B, b, Sc


def predict(filt, psi):
    """Time update ``(F mu, F Sigma F' + W)``."""
    mu, Sigma = predict_arrays(np.asarray(filt.mu, float), np.asarray(filt.Sigma, float),
                               psi.F, psi.W)
    return GaussianMoments(mu, Sigma)


def update(pred, y, psi):
    """Measurement update; ``y=None`` is a missed detection (moments unchanged, loglik 0)."""
    if y is None:
        return pred, 0.0
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != psi.dy:
        raise ValueError(f"observation has dimension {y.shape[-1]}, expected {psi.dy}")
    mu, Sigma, ll = update_arrays(np.asarray(pred.mu, float), np.asarray(pred.Sigma, float),
                                  y, psi.G, psi.V)
    return GaussianMoments(mu, Sigma), (float(ll) if np.ndim(ll) == 0 else ll)


def backward_params(filt, psi):
    B, b, Sc = backward_arrays(np.asarray(filt.mu, float), np.asarray(filt.Sigma, float),
                               psi.F, psi.W)
    return BackwardParams(B, b, Sc)


def predictive_loglik(pred, y, psi):
    """``log N(y; G mu, G Sigma G' + V)``."""
    m, S = innovation_arrays(np.asarray(pred.mu, float), np.asarray(pred.Sigma, float),
                             psi.G, psi.V)
    ll = gaussian_loglik(y, m, S)
    return float(ll) if np.ndim(ll) == 0 else ll


def predictive_loglik_matrix(mu, Sigma, Y, G, V):
    """Log-likelihood of every observation under every target.

    ``mu`` is ``(k, dx)``, ``Y`` is ``(m, dy)``; returns ``(k, m)``.
    """
    m, S = innovation_arrays(mu, Sigma, G, V)
    Lc = _chol(S, "innovation covariance")
    r = Y[None, :, :] - m[:, None, :]                       # (k, m, dy)
    z = np.linalg.solve(Lc[:, None], r[..., None])[..., 0]  # (k, m, dy)
    d = S.shape[-1]
    return -0.5 * (d * _LOG2PI + _logdet_from_chol(Lc)[:, None] + (z * z).sum(-1))

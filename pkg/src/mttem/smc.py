"""Sequential Monte Carlo over association sequences.

Each particle is one hypothesis ``z_{1:t}``. Its proposal samples births
and deaths from the prior, then draws the detection/association from the
softmax over the L best assignments of the cost matrix. Because the prior
parts cancel against the target law, the incremental weight is the
log-sum of exponentiated L-best scores plus a per-scan constant (clutter
Poisson mass and the ``1/k_y!`` ordering term) that is common to all
particles.

All particles are stored jointly in a :class:`SmootherBank`, so the
forward-smoothing statistics of every hypothesis are updated alongside
the filter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from . import _rng
from .assignment import _assoc_kernel, clamp_pd
from .exceptions import FilterCollapseError, InvalidParameterError, StructuralError
from .kalman import predictive_loglik_matrix
from .model import as_model
from .simulator import AssociationRecord
from .smoothing import PLAIN, SmootherBank


@dataclass(frozen=True)
class SMCConfig:
    """Settings of the particle filter.

    ``fixed_k`` switches to the fixed-number-of-targets model: ``fixed_k``
    targets are born at the first step and never die.
    """

    N: int = 100
    L: int = 10
    ess_threshold: float = 0.5
    fixed_k: int | None = None

    def __post_init__(self):
        if self.N < 1:
            raise InvalidParameterError("N must be at least 1")
        if self.L < 1:
            raise InvalidParameterError("L must be at least 1")
        if not 0.0 < self.ess_threshold <= 1.0:
            raise InvalidParameterError("ess_threshold must lie in (0, 1]")
        if self.fixed_k is not None and self.fixed_k < 0:
            raise InvalidParameterError("fixed_k must be nonnegative")


def ess(weights):
    """Effective sample size ``1 / sum(w**2)`` of normalised weights."""
    w = np.asarray(weights, dtype=float)
    return 1.0 / np.dot(w, w)


def systematic_resample(weights, u):
    """Ancestor indices from one uniform ``u`` in ``[0, 1)``."""
    w = np.asarray(weights, dtype=float)
    N = w.size
    c = np.cumsum(w)
    c[-1] = 1.0
    return np.searchsorted(c, (u + np.arange(N)) / N, side="right").clip(0, N - 1)


def scan_constant(theta, k_y):
    """Association-independent part of ``log p(y_t, z_t | z_{1:t-1})``."""
    # the floor matches score_offsets, so all-detected scans stay finite at lambda_f = 0
    lam = max(theta.lambda_f, 1e-300)
    return k_y * math.log(lam / theta.region_volume) - theta.lambda_f - gammaln(k_y + 1)


def score_offsets(theta):
    """Shifted detection and miss scores used by the kernel.

    The shift removes ``log(lambda_f / |Y|)`` per target so that the
    unassigned-measurement factor lives in :func:`scan_constant`.
    """
    p_d = clamp_pd(theta.p_d)
    lam = max(theta.lambda_f, 1e-300)
    return math.log(p_d) - math.log(lam / theta.region_volume), math.log(1.0 - p_d)


def birth_death_logprior(theta, c_s, k_b):
    """Log prior mass of survival indicators and a birth count."""
    c_s = np.asarray(c_s, bool)
    out = 0.0
    ks, kd = int(c_s.sum()), int((~c_s).sum())
    if ks:
        out += ks * math.log(theta.p_s) if theta.p_s > 0 else -np.inf
    if kd:
        out += kd * math.log1p(-theta.p_s) if theta.p_s < 1 else -np.inf
    lam = theta.lambda_b
    if lam > 0:
        out += k_b * math.log(lam) - lam - gammaln(k_b + 1)
    elif k_b > 0:
        out = -np.inf
    return out


class ParticleSet:
    """``N`` weighted association hypotheses with their smoothing states.

    Parameters
    ----------
    config : SMCConfig
    seed : int
        Root of the counter-based streams; every draw at time ``t`` comes
        from ``stream(seed, *key, t, stream_id)``.
    dx, dy : int
    n_groups : int
        Number of step-size groups for the state-free statistics.
    key : tuple of int
        Extra stream key (e.g. the SAEM iteration).
    """

    def __init__(self, config, seed, dx=4, dy=2, n_groups=1, key=()):
        self.config = config
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self.bank = SmootherBank(config.N, dx, dy, n_groups)
        self.logw = np.full(config.N, -math.log(config.N))
        self.log_norm_const = 0.0
        self.t = 0
        self.last = None        # per-particle pieces of the latest record
        self.ancestors = np.arange(config.N)

    @property
    def N(self):
        return self.config.N

    @property
    def weights(self):
        return np.exp(self.logw)

    @property
    def k_x(self):
        return self.bank.counts

    def _stream(self, sid):
        return _rng.stream(self.seed, *self.key, self.t, sid)

    def resample(self, threshold=None, u=None):
        """Systematic resampling when the ESS drops below ``threshold * N``.

        Returns the ancestor map; it is the identity when no resampling
        took place.
        """
        thr = self.config.ess_threshold if threshold is None else threshold
        w = self.weights
        if ess(w) >= thr * self.N:
            pi = np.arange(self.N)
        else:
            if u is None:
                u = self._stream(_rng.SMC_RESAMPLE).random()
            pi = systematic_resample(w, u)
            self.bank = self.bank.select(pi)
            self.logw = np.full(self.N, -math.log(self.N))
        self.ancestors = pi
        return pi

    def step(self, scan, theta, weights=PLAIN, known=None):
        """Resample, propose, reweight; returns the log-likelihood increment.

        ``known`` optionally fixes the birth-death part of the proposal to
        a given ``(c_s, k_b)`` for every particle (all particles must then
        hold the same number of targets).
        """
        theta = as_model(theta)
        self.t += 1
        if self.t > 1:
            self.resample()
        Y = np.asarray(getattr(scan, "points", scan), dtype=float).reshape(-1, self.bank.L.dy)
        c_s, k_b, prior = self._birth_death(theta, known)
        incr = self._propose(theta, Y, c_s, k_b, weights,
                             self._stream(_rng.SMC_ASSOC).random(self.N))
        incr = incr + prior
        step_ll = logsumexp(self.logw + incr)
        if not np.isfinite(step_ll):
            raise FilterCollapseError(self.t)
        self.log_norm_const += float(step_ll)
        lw = self.logw + incr
        self.logw = lw - logsumexp(lw)
        return float(step_ll)

    def _birth_death(self, theta, known):
        N = self.N
        M = self.bank.owner.size
        fk = self.config.fixed_k
        if known is not None:
            c_s0, k_b0 = np.asarray(known[0], bool), int(known[1])
            cnt = self.bank.counts
            if not (cnt == c_s0.size).all():
                raise StructuralError("known birth-death needs equal target counts")
            c_s = np.tile(c_s0, N)
            k_b = np.full(N, k_b0, dtype=np.int64)
            return c_s, k_b, birth_death_logprior(theta, c_s0, k_b0)
        if fk is not None:
            c_s = np.ones(M, dtype=bool)
            k_b = np.full(N, fk if self.t == 1 else 0, dtype=np.int64)
            return c_s, k_b, 0.0
        c_s = self._stream(_rng.SMC_DEATH).random(M) < theta.p_s
        k_b = self._stream(_rng.SMC_BIRTH).poisson(theta.lambda_b, size=N).astype(np.int64)
        return c_s, k_b, 0.0

    def _propose(self, theta, Y, c_s, k_b, weights, u):
        incr, self.last = _propose_bank(self.bank, theta, Y, c_s, k_b, weights, u,
                                        self.config.L)
        return incr

    # -- summaries
    def record(self, i):
        """Association record of particle ``i`` at the latest step."""
        last = self.last
        if last is None:
            raise StructuralError("no step has been taken")
        own = last["owner"]
        obs = last["obs"][own == i]
        c_d = obs >= 0
        a = obs[c_d]
        return dict(c_d=c_d.astype(np.int8), a=a, k_b=int(last["k_b"][i]),
                    k_f=last["k_y"] - int(c_d.sum()))

    def expectations(self):
        """Particle-weighted sufficient statistics, one set per group."""
        return self.bank.expectations(self.weights)

    def mean_k_x(self):
        return float(np.dot(self.weights, self.k_x))


def _propose_bank(bank, theta, Y, c_s, k_b, weights, u, L):
    """Birth-death move, L-best association and reweighting for a bank.

    Returns the per-particle log incremental weights and the pieces of the
    sampled records.
    """
    g = theta.glssm
    N = bank.N
    mu, Sig, owner = bank.advance(g, c_s, k_b, weights)
    ky = Y.shape[0]
    M = owner.size
    if M and ky:
        ll = predictive_loglik_matrix(mu, Sig, Y, g.G, g.V)
    else:
        ll = np.zeros((M, ky))
    det, miss = score_offsets(theta)
    nx = np.bincount(owner, minlength=N).astype(np.int64)
    start = np.concatenate([[0], np.cumsum(nx)[:-1]]).astype(np.int64)
    alpha = np.empty(M, dtype=np.int64)
    logsum = np.empty(N)
    count = np.empty(N, dtype=np.int64)
    _assoc_kernel(np.ascontiguousarray(ll), start, nx, ky, det, miss, int(L),
                  np.asarray(u, dtype=float), alpha, logsum, count)
    obs = np.where((alpha >= 0) & (alpha < ky), alpha, -1)
    bank.correct(g, Y, obs)
    last = dict(c_s=c_s, k_b=k_b, obs=obs, owner=owner, k_y=ky)
    return logsum + scan_constant(theta, ky), last


def smc_step(pset, scan, theta, weights=PLAIN, known=None):
    """Advance ``pset`` by one scan in place; returns it."""
    pset.step(scan, theta, weights=weights, known=known)
    return pset


def resample(pset, threshold=None, u=None):
    pi = pset.resample(threshold, u)
    return pset, pi


def log_marginal_likelihood(pset):
    return pset.log_norm_const


def run_filter(scans, theta, config, seed, key=()):
    """Filter a whole scan sequence; returns the particle set."""
    theta = as_model(theta)
    g = theta.glssm
    pset = ParticleSet(config, seed, g.dx, g.dy, key=key)
    for s in scans:
        pset.step(s, theta)
    return pset


@dataclass(eq=False)
class Particle:
    """One hypothesis held in a single-particle bank."""

    bank: SmootherBank
    record: AssociationRecord | None = None
    log_weight: float = 0.0

    @classmethod
    def empty(cls, dx=4, dy=2, n_groups=1):
        return cls(SmootherBank(1, dx, dy, n_groups))

    @property
    def k_x(self):
        return int(self.bank.owner.size)


def propose_step(p, scan, theta, L, rng, weights=PLAIN):
    """Propose ``z_t`` for one particle; returns ``(new_particle, log_incr_weight)``.

    ``rng`` is a numpy ``Generator``. The input particle is not modified.
    """
    bank = p.bank.select([0])
    theta = as_model(theta)
    g = theta.glssm
    Y = np.asarray(getattr(scan, "points", scan), dtype=float).reshape(-1, g.dy)
    c_s = rng.random(bank.owner.size) < theta.p_s
    k_b = np.array([rng.poisson(theta.lambda_b)], dtype=np.int64)
    incr, last = _propose_bank(bank, theta, Y, c_s, k_b, weights, rng.random(1), L)
    c_d = last["obs"] >= 0
    rec = AssociationRecord(c_s=c_s, c_d=c_d, k_b=int(k_b[0]),
                            k_f=Y.shape[0] - int(c_d.sum()), a=last["obs"][c_d])
    return Particle(bank, rec, p.log_weight + float(incr[0])), float(incr[0])

"""EM estimators: exact EM along known associations, batch SAEM and online EM.

All three share the closed-form M-step :func:`~mttem.model.lambda_mstep`
and differ only in how the expected sufficient statistics are formed:

* :class:`OracleEM` smooths along the true association (no Monte Carlo);
* :class:`SAEM` averages particle expectations from a full SMC pass per
  iteration and blends them across iterations with a decaying step size;
* :class:`OnlineEM` runs one SMC pass with step-size discounted smoothing
  recursions and applies the M-step after every scan.

The estimators follow the scikit-learn conventions: constructor arguments
are hyper-parameters, ``fit`` takes the scan sequence and sets ``params_``
and ``trace_``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln
from sklearn.base import BaseEstimator

from ._validation import check_cv, check_scans, check_truth
from .exceptions import FilterCollapseError, InvalidParameterError
from .kalman import predict_arrays, update_arrays
from .model import CV_FIELDS, PARAM_STATS, as_model, lambda_mstep
from .smc import ParticleSet, SMCConfig, birth_death_logprior
from .smoothing import PLAIN, SmootherBank, StepWeights, SufficientStatSet, layout

#: parameters that fixed-K runs never update
FIXED_K_HOLD = ("p_s", "lambda_b", "mu_bx", "mu_by", "sigma_bp2", "sigma_bv2")


# ------------------------------------------------------------ step sizes

@dataclass(frozen=True)
class StepSizeSchedule:
    """Step sizes ``gamma_j = j ** -alpha`` with per-parameter exponents.

    ``alpha = 0`` gives ``gamma_j = 1`` (no memory); it is accepted for
    testing alongside the convergent range ``(0.5, 1]``.
    """

    alpha: float = 0.8
    overrides: dict = field(default_factory=lambda: {"sigma_xv2": 0.55})
    t_b: int = 10

    def __post_init__(self):
        for name, a in [("alpha", self.alpha), *self.overrides.items()]:
            if not (a == 0.0 or 0.5 < a <= 1.0):
                raise InvalidParameterError(f"exponent for {name} must be 0 or in (0.5, 1]")
        unknown = set(self.overrides) - set(CV_FIELDS)
        if unknown:
            raise InvalidParameterError(f"unknown parameters in overrides: {sorted(unknown)}")
        if self.t_b < 1:
            raise InvalidParameterError("burn-in t_b must be at least 1")

    def exponent(self, name):
        return self.overrides.get(name, self.alpha)

    @staticmethod
    def gamma(j, a):
        return float(j) ** -a

    def plan(self, hold=(), dx=4, dy=2):
        return _GammaPlan(self, tuple(hold), dx, dy)


class _GammaPlan:
    """Resolved grouping of statistics by step-size exponent."""

    def __init__(self, sched, hold, dx, dy):
        hold = set(hold) | {"sigma_xp2"}
        active = [p for p in CV_FIELDS if p not in hold]
        exps = sorted({sched.exponent(p) for p in active} | {sched.alpha}, reverse=True)
        self.exps = np.array(exps)
        self.group = {p: exps.index(sched.exponent(p)) for p in CV_FIELDS}
        m_exp = {}
        for p in active:
            for m in PARAM_STATS[p]:
                if m > 7:
                    continue
                a = sched.exponent(p)
                if m_exp.setdefault(m, a) != a:
                    raise InvalidParameterError(
                        f"statistic S{m} is shared by parameters with different exponents")
        self.m_exp = np.array([m_exp.get(m, sched.alpha) for m in range(1, 8)])
        self.L = layout(dx, dy)
        self.slot_exp = self.L.slot_gamma(self.m_exp)
        self.hold = tuple(sorted(hold))

    @property
    def G(self):
        return self.exps.size

    def weights(self, j):
        """Per-slot and per-group step sizes at index ``j`` (1-based)."""
        j = float(j)
        return StepWeights(x_gamma=j ** -self.slot_exp, z_gamma=j ** -self.exps)

    def element_gamma(self, j, g):
        """Step size of every element of a stat vector of group ``g``."""
        w = self.weights(j)
        return np.concatenate([w.x_gamma, np.full(self.L.nz, w.z_gamma[g])])

    def mstep(self, sets, prev):
        """Apply the M-step to per-group stat sets."""
        overrides = {p: sets[self.group[p]] for p in CV_FIELDS}
        return lambda_mstep(sets[0], prev, overrides=overrides, hold=self.hold)


# ------------------------------------------------------------ traces

@dataclass
class EstimateTrace:
    """Parameter iterates ``(index, CvParams, loglik or None)``."""

    rows: list = field(default_factory=list)

    def append(self, index, params, loglik=None):
        if self.rows and index <= self.rows[-1][0]:
            raise ValueError("trace indices must increase")
        self.rows.append((int(index), params, None if loglik is None else float(loglik)))

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, k):
        return self.rows[k]

    @property
    def index(self):
        return np.array([r[0] for r in self.rows])

    @property
    def loglik(self):
        return np.array([np.nan if r[2] is None else r[2] for r in self.rows])

    def values(self, name=None):
        """Matrix of iterates (rows in ``CV_FIELDS`` order) or one column."""
        M = np.array([r[1].vector() for r in self.rows])
        if name is None:
            return M
        return M[:, CV_FIELDS.index(name)]

    @property
    def final(self):
        return self.rows[-1][1]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("index",) + CV_FIELDS + ("loglik",))
            for idx, p, ll in self.rows:
                w.writerow([idx] + [format(v, ".17g") for v in p.vector()]
                           + ["" if ll is None else format(ll, ".17g")])


# ------------------------------------------------------------ known association

def joint_loglik(scans, truth, theta, fixed_k=False):
    """``log p_theta(y_{1:n}, z_{1:n})`` with the states integrated out.

    With ``fixed_k`` the birth-death part of ``z`` is structural and its
    prior mass is left out.
    """
    theta = as_model(theta)
    g = theta.glssm
    dx = g.dx
    logV = math.log(theta.region_volume)
    p_d = theta.p_d
    mu = np.zeros((0, dx))
    Sig = np.zeros((0, dx, dx))
    out = 0.0
    for rec, s in zip(truth.records, scans):
        if not fixed_k:
            out += birth_death_logprior(theta, rec.c_s, rec.k_b)
        keep = rec.c_s.astype(bool)
        mu_s, Sig_s = predict_arrays(mu[keep], Sig[keep], g.F, g.W)
        mu = np.concatenate([mu_s, np.broadcast_to(g.mu_b, (rec.k_b, dx))])
        Sig = np.concatenate([Sig_s, np.broadcast_to(g.Sigma_b, (rec.k_b, dx, dx))])
        kd, kx, kf, ky = rec.k_d, rec.k_x, rec.k_f, rec.k_y
        out += _xlog(kd, p_d) + _xlog(kx - kd, 1.0 - p_d)
        lam = theta.lambda_f
        out += (_xlog(kf, lam) - lam - gammaln(kf + 1)) + gammaln(kf + 1) - gammaln(ky + 1)
        out -= kf * logV
        det = rec.c_d.astype(bool)
        if det.any():
            Y = s.points[rec.a]
            mu[det], Sig[det], ll = update_arrays(mu[det], Sig[det], Y, g.G, g.V)
            out += float(ll.sum())
    return float(out)


def _xlog(k, p):
    if k == 0:
        return 0.0
    return k * math.log(p) if p > 0 else -np.inf


def known_z_bank(scans, truth, theta, weights=None, n_groups=1):
    """Smoothing bank run along the true association.

    ``weights`` is ``None`` (plain sums) or a callable ``t -> StepWeights``.
    """
    theta = as_model(theta)
    g = theta.glssm
    bank = SmootherBank(1, g.dx, g.dy, n_groups)
    for t, (rec, s) in enumerate(zip(truth.records, scans), start=1):
        w = PLAIN if weights is None else weights(t)
        bank.step(g, rec.c_s, [rec.k_b], s.points, rec.obs_index(), w)
    return bank


def known_z_stats(scans, truth, theta):
    """Exact ``E[S | y, z]`` along the true association (plain sums)."""
    return known_z_bank(scans, truth, theta).expectations()[0]


def oracle_em(scans, truth, theta0, iters, fixed_k=False):
    """Exact EM iterations along the true association; returns the trace."""
    est = OracleEM(theta0=theta0, n_iter=iters, fixed_k=fixed_k).fit(scans, truth)
    return est.trace_


class OracleEM(BaseEstimator):
    """EM with the true association supplied (the benchmark estimator).

    Parameters
    ----------
    theta0 : CvParams
        Starting point.
    n_iter : int
        Number of EM iterations.
    hold : tuple of str
        Parameters kept at their starting values.
    fixed_k : bool
        Treat the data as fixed-K: births and deaths are structural, the
        birth-death and birth-distribution parameters are held.
    """

    def __init__(self, theta0=None, n_iter=50, hold=(), fixed_k=False):
        self.theta0 = theta0
        self.n_iter = n_iter
        self.hold = hold
        self.fixed_k = fixed_k

    def fit(self, scans, truth):
        scans = check_scans(scans)
        check_truth(truth, scans)
        theta = check_cv(self.theta0)
        if self.n_iter < 1:
            raise InvalidParameterError("n_iter must be at least 1")
        fk = bool(self.fixed_k)
        hold = tuple(self.hold) + (FIXED_K_HOLD if fk else ())
        trace = EstimateTrace()
        trace.append(0, theta, joint_loglik(scans, truth, theta, fk))
        for j in range(1, self.n_iter + 1):
            stats = known_z_stats(scans, truth, theta)
            theta = lambda_mstep(stats, theta, hold=hold)
            trace.append(j, theta, joint_loglik(scans, truth, theta, fk))
        self.params_ = theta
        self.trace_ = trace
        self.stats_ = stats
        return self


# ------------------------------------------------------------ SAEM

class SAEM(BaseEstimator):
    """Batch stochastic-approximation EM with an SMC E-step.

    Parameters
    ----------
    theta0 : CvParams
    n_particles, L : int
        SMC size and assignment-ranking depth.
    schedule : StepSizeSchedule
    n_iter : int
    seed : int
    fixed_k : int or None
        Fixed number of immortal targets (holds the birth/death parameters).
    ess_threshold : float
    """

    def __init__(self, theta0=None, n_particles=200, L=10, schedule=None, n_iter=100,
                 seed=0, fixed_k=None, ess_threshold=0.5, hold=()):
        self.theta0 = theta0
        self.n_particles = n_particles
        self.L = L
        self.schedule = schedule
        self.n_iter = n_iter
        self.seed = seed
        self.fixed_k = fixed_k
        self.ess_threshold = ess_threshold
        self.hold = hold

    def _hold(self):
        return tuple(self.hold) + (FIXED_K_HOLD if self.fixed_k is not None else ())

    def fit(self, scans, y=None, callback=None):
        scans = check_scans(scans)
        theta = check_cv(self.theta0)
        if self.n_iter < 1:
            raise InvalidParameterError("n_iter must be at least 1")
        sched = self.schedule or StepSizeSchedule()
        plan = sched.plan(self._hold())
        cfg = SMCConfig(N=self.n_particles, L=self.L, ess_threshold=self.ess_threshold,
                        fixed_k=self.fixed_k)
        trace = EstimateTrace()
        trace.append(0, theta)
        blended = None
        for j in range(1, self.n_iter + 1):
            model = theta.to_model()
            ps = ParticleSet(cfg, self.seed, key=(j,))
            try:
                for s in scans:
                    ps.step(s, model)
            except FilterCollapseError as exc:
                raise FilterCollapseError(exc.t, f"SAEM iteration {j}: {exc}") from exc
            S = ps.expectations()[0]
            if blended is None:
                blended = [S.vec.copy() for _ in range(plan.G)]
            for g in range(plan.G):
                gam = plan.element_gamma(j, g)
                blended[g] = (1.0 - gam) * blended[g] + gam * S.vec
            sets = [SufficientStatSet(v, S.dx, S.dy) for v in blended]
            theta = plan.mstep(sets, theta)
            trace.append(j, theta, ps.log_norm_const)
            if callback is not None:
                callback(j, theta, ps)
        self.params_ = theta
        self.trace_ = trace
        return self


def saem_batch(scans, theta0, config):
    """Functional form of :class:`SAEM`; ``config`` holds its keyword arguments."""
    return SAEM(theta0=theta0, **config).fit(scans).trace_


# ------------------------------------------------------------ online EM

class OnlineEM(BaseEstimator):
    """SMC online EM: M-step after every scan from discounted statistics.

    Parameters
    ----------
    theta0 : CvParams
    n_particles, L : int
    schedule : StepSizeSchedule
        Step sizes ``gamma_t`` and burn-in ``t_b``; before ``t_b`` the
        parameters stay at ``theta0``.
    seed : int
    fixed_k : int or None
    """

    def __init__(self, theta0=None, n_particles=100, L=10, schedule=None, seed=0,
                 fixed_k=None, ess_threshold=0.5, hold=()):
        self.theta0 = theta0
        self.n_particles = n_particles
        self.L = L
        self.schedule = schedule
        self.seed = seed
        self.fixed_k = fixed_k
        self.ess_threshold = ess_threshold
        self.hold = hold

    def _hold(self):
        return tuple(self.hold) + (FIXED_K_HOLD if self.fixed_k is not None else ())

    def fit(self, scans, y=None, known=None, callback=None):
        """Run over ``scans``.

        ``known`` optionally supplies the true birth-death part of the
        association per step (a sequence of ``(c_s, k_b)``, or a
        :class:`GroundTruth`).
        """
        scans = check_scans(scans)
        theta = check_cv(self.theta0)
        sched = self.schedule or StepSizeSchedule()
        plan = sched.plan(self._hold())
        cfg = SMCConfig(N=self.n_particles, L=self.L, ess_threshold=self.ess_threshold,
                        fixed_k=self.fixed_k)
        if known is not None and hasattr(known, "records"):
            known = [(r.c_s, r.k_b) for r in known.records]
        ps = ParticleSet(cfg, self.seed, n_groups=plan.G)
        trace = EstimateTrace()
        trace.append(0, theta)
        model = theta.to_model()
        for t, s in enumerate(scans, start=1):
            kn = None if known is None else known[t - 1]
            ps.step(s, model, weights=plan.weights(t), known=kn)
            if t >= sched.t_b:
                theta = plan.mstep(ps.expectations(), theta)
                model = theta.to_model()
            trace.append(t, theta, ps.log_norm_const)
            if callback is not None:
                callback(t, theta, ps)
        self.params_ = theta
        self.trace_ = trace
        self.particles_ = ps
        return self


def online_em(scans, theta0, config):
    """Functional form of :class:`OnlineEM`; ``config`` holds its keyword arguments."""
    return OnlineEM(theta0=theta0, **config).fit(scans).trace_


# ------------------------------------------------------------ model selection

@dataclass
class SelectKResult:
    k_range: tuple
    curves: np.ndarray          # (len(k_range), n): log p_hat(y_{1:t} | K) / t

    def argmax(self, t=None):
        """Best ``K`` at 1-based time ``t`` (all times if ``None``)."""
        best = np.asarray(self.k_range)[np.argmax(self.curves, axis=0)]
        return best if t is None else int(best[t - 1])


def select_k(scans, k_range, theta0, config=None):
    """Compare fixed-K online EM runs by their time-normalised likelihoods."""
    k_range = tuple(int(k) for k in k_range)
    if not k_range:
        raise InvalidParameterError("k_range is empty")
    scans = check_scans(scans)
    config = dict(config or {})
    config.pop("fixed_k", None)
    n = len(scans)
    curves = np.empty((len(k_range), n))
    tt = np.arange(1, n + 1)
    for row, K in enumerate(k_range):
        est = OnlineEM(theta0=theta0, fixed_k=K, **config).fit(scans)
        curves[row] = est.trace_.loglik[1:] / tt
    return SelectKResult(k_range, curves)

"""Parameter containers, the constant-velocity parametrisation and the M-step.

The MTT model is described by ``ModelParams``: the single-target GLSSM
matrices plus survival/detection probabilities and Poisson birth/clutter
rates. ``CvParams`` is the eleven-number constant-velocity parametrisation
used throughout the experiments; ``cv_assemble`` maps it to matrices and
``lambda_mstep`` is the closed-form maximiser of the expected complete-data
log-likelihood for it.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import TYPE_CHECKING

import numpy as np

from .exceptions import InvalidParameterError

if TYPE_CHECKING:  # pragma: no cover
    from .smoothing import SufficientStatSet

DENOM_FLOOR = 1e-12
PROB_CLAMP = 1e-6
VAR_FLOOR = 1e-12
RATE_FLOOR = 1e-12

#: Names of the eleven CV parameters, in serialisation order.
CV_FIELDS = (
    "lambda_b", "lambda_f", "p_d", "p_s", "mu_bx", "mu_by",
    "sigma_bp2", "sigma_bv2", "sigma_xp2", "sigma_xv2", "sigma_y2",
)
JSON_KEYS = CV_FIELDS + ("delta", "kappa", "rho")
_VARIANCES = ("sigma_bp2", "sigma_bv2", "sigma_xp2", "sigma_xv2", "sigma_y2")


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GlssmParams:
    """Single-target linear-Gaussian state-space model."""

    mu_b: np.ndarray
    Sigma_b: np.ndarray
    F: np.ndarray
    G: np.ndarray
    W: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _frozen(getattr(self, f.name)))
        dx, dy = self.mu_b.shape[0], self.G.shape[0]
        shapes = {"Sigma_b": (dx, dx), "F": (dx, dx), "G": (dy, dx),
                  "W": (dx, dx), "V": (dy, dy)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise InvalidParameterError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in ("Sigma_b", "W", "V"):
            m = getattr(self, name)
            if not np.allclose(m, m.T, atol=1e-12):
                raise InvalidParameterError(f"{name} is not symmetric")
            if np.linalg.eigvalsh(m).min() < -1e-10:
                raise InvalidParameterError(f"{name} is not positive semidefinite")

    @property
    def dx(self):
        return self.mu_b.shape[0]

    @property
    def dy(self):
        return self.G.shape[0]


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full MTT parameter vector ``(psi, p_s, p_d, lambda_b, lambda_f)``.

    ``kappa`` is the half-width of the square observation window
    ``[-kappa, kappa]^dy``.
    """

    glssm: GlssmParams
    p_s: float
    p_d: float
    lambda_b: float
    lambda_f: float
    kappa: float = 100.0

    def __post_init__(self):
        for name in ("p_s", "p_d"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidParameterError(f"{name}={v} outside [0, 1]")
        for name in ("lambda_b", "lambda_f"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be nonnegative")
        if self.kappa <= 0:
            raise InvalidParameterError("kappa must be positive")

    @property
    def region_volume(self):
        return (2.0 * self.kappa) ** self.glssm.dy


@dataclass(frozen=True)
class CvParams:
    """Constant-velocity parametrisation (position/velocity in the plane).

    ``rho`` damps the diagonal blocks of ``F``; ``rho=1`` is the plain
    constant-velocity model.
    """

    lambda_b: float
    lambda_f: float
    p_d: float
    p_s: float
    mu_bx: float
    mu_by: float
    sigma_bp2: float
    sigma_bv2: float
    sigma_xp2: float
    sigma_xv2: float
    sigma_y2: float
    delta: float = 1.0
    kappa: float = 100.0
    rho: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, float(getattr(self, f.name)))
        for name in _VARIANCES:
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name}={getattr(self, name)} is negative")
        for name in ("p_d", "p_s"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidParameterError(f"{name} outside [0, 1]")
        for name in ("lambda_b", "lambda_f"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be nonnegative")
        if self.kappa <= 0:
            raise InvalidParameterError("kappa must be positive")
        if not 0.0 < self.rho <= 1.0:
            raise InvalidParameterError(f"rho={self.rho} outside (0, 1]")
        if self.delta < 0:
            raise InvalidParameterError("delta must be nonnegative")

    def vector(self):
        """The eleven estimated quantities as an array (``CV_FIELDS`` order)."""
        return np.array([getattr(self, k) for k in CV_FIELDS])

    def to_model(self):
        return cv_assemble(self)

    def to_json(self):
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in CV_FIELDS + ("delta", "kappa") if k not in d]
        if missing:
            raise InvalidParameterError(f"missing parameter keys: {missing}")
        unknown = set(d) - set(JSON_KEYS)
        if unknown:
            raise InvalidParameterError(f"unknown parameter keys: {sorted(unknown)}")
        return cls(**{k: d[k] for k in JSON_KEYS if k in d})

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def cv_assemble_stationary(cv, rho):
    """Build ``ModelParams`` for the CV model with ``rho``-damped diagonals."""
    if not 0.0 < rho <= 1.0:
        raise InvalidParameterError(f"rho={rho} outside (0, 1]")
    for name in _VARIANCES:
        if getattr(cv, name) < 0:
            raise InvalidParameterError(f"{name} is negative")
    I2, Z2 = np.eye(2), np.zeros((2, 2))
    F = np.block([[rho * I2, cv.delta * I2], [Z2, rho * I2]])
    G = np.hstack([I2, Z2])
    W = np.diag([cv.sigma_xp2, cv.sigma_xp2, cv.sigma_xv2, cv.sigma_xv2])
    V = cv.sigma_y2 * I2
    mu_b = np.array([cv.mu_bx, cv.mu_by, 0.0, 0.0])
    Sigma_b = np.diag([cv.sigma_bp2, cv.sigma_bp2, cv.sigma_bv2, cv.sigma_bv2])
    glssm = GlssmParams(mu_b=mu_b, Sigma_b=Sigma_b, F=F, G=G, W=W, V=V)
    return ModelParams(glssm=glssm, p_s=cv.p_s, p_d=cv.p_d, lambda_b=cv.lambda_b,
                       lambda_f=cv.lambda_f, kappa=cv.kappa)


def cv_assemble(cv):
    """Build ``ModelParams`` for the CV model (uses ``cv.rho``, 1 by default)."""
    return cv_assemble_stationary(cv, cv.rho)


def cv_extract(theta):
    """Read a ``CvParams`` back from CV-structured ``ModelParams``."""
    g = theta.glssm
    return CvParams(
        lambda_b=theta.lambda_b, lambda_f=theta.lambda_f, p_d=theta.p_d, p_s=theta.p_s,
        mu_bx=g.mu_b[0], mu_by=g.mu_b[1],
        sigma_bp2=g.Sigma_b[0, 0], sigma_bv2=g.Sigma_b[2, 2],
        sigma_xp2=g.W[0, 0], sigma_xv2=g.W[2, 2], sigma_y2=g.V[0, 0],
        delta=g.F[0, 2], kappa=theta.kappa, rho=g.F[0, 0],
    )


# parameter -> sufficient statistics its update reads
PARAM_STATS = {
    "lambda_b": (13, 15), "lambda_f": (14, 15), "p_d": (9, 10), "p_s": (11, 12),
    "mu_bx": (6, 13), "mu_by": (6, 13),
    "sigma_bp2": (6, 7, 13), "sigma_bv2": (6, 7, 13),
    "sigma_xp2": (3, 4, 5, 11), "sigma_xv2": (3, 4, 5, 11),
    "sigma_y2": (1, 2, 8, 9),
}


def _ratio(num, den, fallback):
    if den < DENOM_FLOOR:
        return fallback
    return num / den


def _clamp_p(p):
    return min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)


def lambda_mstep(stats, prev, overrides=None, hold=()):
    """Closed-form M-step for the constant-velocity model.

    Parameters
    ----------
    stats : SufficientStatSet
        Expected sufficient statistics ``S1..S15``.
    prev : CvParams
        Previous iterate; supplies ``delta``, ``kappa``, ``rho`` and any
        component whose denominator is degenerate or that is held.
    overrides : dict, optional
        Parameter name -> ``SufficientStatSet`` to use for that parameter
        instead of ``stats`` (dual-rate stochastic approximation).
    hold : iterable of str
        Parameters copied unchanged from ``prev``.

    Returns
    -------
    CvParams
    """
    overrides = overrides or {}
    hold = set(hold) | {"sigma_xp2"}
    S = {name: overrides.get(name, stats) for name in CV_FIELDS}
    Mp = np.hstack([np.eye(2), np.zeros((2, 2))])
    Mv = np.hstack([np.zeros((2, 2)), np.eye(2)])
    F = prev.to_model().glssm.F
    G = Mp
    new = {}

    s = S["lambda_b"]
    new["lambda_b"] = _ratio(s.S13, s.S15, prev.lambda_b)
    s = S["lambda_f"]
    new["lambda_f"] = max(_ratio(s.S14, s.S15, prev.lambda_f), RATE_FLOOR)
    s = S["p_d"]
    new["p_d"] = _clamp_p(_ratio(s.S9, s.S10, prev.p_d))
    s = S["p_s"]
    new["p_s"] = _clamp_p(_ratio(s.S11, s.S12, prev.p_s))

    s = S["mu_bx"]
    new["mu_bx"] = _ratio(s.S6[0], s.S13, prev.mu_bx)
    s = S["mu_by"]
    new["mu_by"] = _ratio(s.S6[1], s.S13, prev.mu_by)
    mu_b = np.array([new["mu_bx"], new["mu_by"], 0.0, 0.0])

    for name, M in (("sigma_bp2", Mp), ("sigma_bv2", Mv)):
        s = S[name]
        R = (s.S7 - np.outer(s.S6, mu_b) - np.outer(mu_b, s.S6)
             + s.S13 * np.outer(mu_b, mu_b))
        new[name] = _ratio(np.trace(M @ R @ M.T), 2.0 * s.S13, getattr(prev, name))

    for name, M in (("sigma_xp2", Mp), ("sigma_xv2", Mv)):
        s = S[name]
        Fm = M @ F
        num = (np.trace(M @ s.S4 @ M.T) - 2.0 * np.trace(Fm @ s.S5 @ M.T)
               + np.trace(Fm @ s.S3 @ Fm.T))
        new[name] = _ratio(num, 2.0 * s.S11, getattr(prev, name))

    s = S["sigma_y2"]
    R = s.S8 - G @ s.S2 - s.S2.T @ G.T + G @ s.S1 @ G.T
    new["sigma_y2"] = _ratio(np.trace(R), 2.0 * s.S9, prev.sigma_y2)

    for name in _VARIANCES:
        new[name] = max(new[name], VAR_FLOOR)
    for name in hold:
        new[name] = getattr(prev, name)
    return replace(prev, **new)


def expected_complete_loglik(stats, cv):
    """Expected complete-data log-likelihood ``Q`` as a function of ``cv``.

    Terms that do not depend on the ten estimated parameters (the
    ``k_f!/k_y!`` association law, the clutter volume and the deterministic
    position transition implied by ``sigma_xp2 = 0``) are dropped.
    """
    s = stats
    theta = cv.to_model()
    g = theta.glssm
    out = 0.0
    out += _xlogy(s.S11, cv.p_s) + _xlogy(s.S12 - s.S11, 1.0 - cv.p_s)
    out += _xlogy(s.S9, cv.p_d) + _xlogy(s.S10 - s.S9, 1.0 - cv.p_d)
    out += _xlogy(s.S13, cv.lambda_b) - s.S15 * cv.lambda_b
    out += _xlogy(s.S14, cv.lambda_f) - s.S15 * cv.lambda_f

    def gauss(count, R, cov):
        sign, logdet = np.linalg.slogdet(cov)
        return -0.5 * count * (logdet + cov.shape[0] * math.log(2 * math.pi)) \
            - 0.5 * np.trace(np.linalg.solve(cov, R))

    mu_b = g.mu_b
    Rb = s.S7 - np.outer(s.S6, mu_b) - np.outer(mu_b, s.S6) + s.S13 * np.outer(mu_b, mu_b)
    out += gauss(s.S13, Rb, g.Sigma_b)
    Mv = np.hstack([np.zeros((2, 2)), np.eye(2)])
    Fv = Mv @ g.F
    Rx = Mv @ s.S4 @ Mv.T - Fv @ s.S5 @ Mv.T - Mv @ s.S5.T @ Fv.T + Fv @ s.S3 @ Fv.T
    out += gauss(s.S11, Rx, cv.sigma_xv2 * np.eye(2))
    Ry = s.S8 - g.G @ s.S2 - s.S2.T @ g.G.T + g.G @ s.S1 @ g.G.T
    out += gauss(s.S9, Ry, g.V)
    return float(out)


def _xlogy(x, y):
    if x == 0:
        return 0.0
    return x * math.log(y)


@dataclass(frozen=True)
class CostModelConstants:
    """Unit costs of the SMC filtering cost model (all default to 1)."""

    c: tuple = field(default=(1.0,) * 9)
    L: int = 10
    N: int = 100
    d_x: int = 4

    def __post_init__(self):
        if len(self.c) != 9 or any(v < 0 for v in self.c):
            raise InvalidParameterError("need nine nonnegative cost constants")
        if self.L < 0 or self.N < 0 or self.d_x < 0:
            raise InvalidParameterError("L, N, d_x must be nonnegative")


def stationary_rates(theta):
    """Return ``(lambda_x, lambda_y)``: mean target and scan-plus-target counts."""
    if theta.p_s >= 1.0:
        raise InvalidParameterError("p_s = 1 has no stationary target count")
    lam_x = theta.lambda_b / (1.0 - theta.p_s)
    lam_y = lam_x * (1.0 + theta.p_d) + theta.lambda_f
    return lam_x, lam_y


def expected_smc_cost(theta, consts=None):
    """Expected per-step cost of SMC filtering at stationarity."""
    consts = consts or CostModelConstants()
    c1, c2, c3, c4, c5, c6 = consts.c[:6]
    lam_x, lam_y = stationary_rates(theta)
    dx3 = consts.d_x ** 3
    third_moment = lam_y ** 3 + 3 * lam_y ** 2 + lam_y
    per_particle = (
        (c1 + c3)
        + (c2 + dx3 * (c4 + c5 * (theta.p_d + theta.lambda_f))) * lam_x
        + c5 * theta.p_d * lam_x ** 2
        + c6 * consts.L * third_moment
    )
    return consts.N * per_particle


def as_model(theta):
    """``ModelParams`` from either parameterisation."""
    if isinstance(theta, CvParams):
        return theta.to_model()
    if isinstance(theta, ModelParams):
        return theta
    raise InvalidParameterError("expected ModelParams or CvParams")

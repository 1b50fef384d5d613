"""Synthetic data from the multiple target tracking model.

At every step each existing target survives with probability ``p_s`` and
moves by the GLSSM transition, a Poisson(``lambda_b``) number of new
targets is born, each target is detected with probability ``p_d``, and a
Poisson(``lambda_f``) number of false measurements is scattered uniformly
over the square window. The scan is a uniformly random ordering of
target-generated and false measurements.

A target whose measurement falls outside the window counts as missed, and
the recorded detection indicators say so.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _rng
from .exceptions import DataError, InvalidParameterError, StructuralError
from .model import as_model


@dataclass(eq=False)
class AssociationRecord:
    """Discrete latent structure of one time step (0-based indices).

    ``c_s[j]`` says whether previous target ``j`` survived, ``c_d[k]``
    whether current target ``k`` was detected, and ``a[k]`` is the scan
    index of the observation produced by the ``k``-th detected target.
    Current targets are the survivors in their previous order followed
    by the ``k_b`` births.
    """

    c_s: np.ndarray
    c_d: np.ndarray
    k_b: int
    k_f: int
    a: np.ndarray

    def __post_init__(self):
        self.c_s = np.asarray(self.c_s, dtype=np.int8).reshape(-1)
        self.c_d = np.asarray(self.c_d, dtype=np.int8).reshape(-1)
        self.a = np.asarray(self.a, dtype=np.int64).reshape(-1)
        self.k_b = int(self.k_b)
        self.k_f = int(self.k_f)

    k_s = property(lambda self: int(self.c_s.sum()))
    k_x = property(lambda self: self.k_s + self.k_b)
    k_d = property(lambda self: int(self.c_d.sum()))
    k_y = property(lambda self: self.k_d + self.k_f)
    i_s = property(lambda self: np.flatnonzero(self.c_s))
    i_d = property(lambda self: np.flatnonzero(self.c_d))

    def obs_index(self):
        """Scan index per current target, ``-1`` when missed."""
        out = np.full(self.c_d.size, -1, dtype=np.int64)
        out[self.i_d] = self.a
        return out

    def validate(self, k_prev=None, k_y=None):
        """Raise :class:`StructuralError` if the record is inconsistent."""
        if not np.isin(self.c_s, (0, 1)).all() or not np.isin(self.c_d, (0, 1)).all():
            raise StructuralError("indicator vectors must be 0/1")
        if self.k_b < 0 or self.k_f < 0:
            raise StructuralError("negative count")
        if k_prev is not None and self.c_s.size != k_prev:
            raise StructuralError(f"c_s has length {self.c_s.size}, expected {k_prev}")
        if self.c_d.size != self.k_x:
            raise StructuralError(f"c_d has length {self.c_d.size}, expected k_x={self.k_x}")
        if self.a.size != self.k_d:
            raise StructuralError("a must have one entry per detected target")
        if k_y is not None and self.k_y != k_y:
            raise StructuralError(f"record implies k_y={self.k_y}, scan has {k_y}")
        if self.a.size and (self.a.min() < 0 or self.a.max() >= self.k_y):
            raise StructuralError("association index out of range")
        if np.unique(self.a).size != self.a.size:
            raise StructuralError("association is not injective")

    def to_dict(self):
        return {"c_s": self.c_s.tolist(), "c_d": self.c_d.tolist(), "k_b": self.k_b,
                "k_f": self.k_f, "a": self.a.tolist()}


@dataclass(eq=False)
class ObservationScan:
    t: int
    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        self.points = p.reshape(0, 2) if p.size == 0 and p.ndim < 2 else p

    @property
    def k_y(self):
        return self.points.shape[0]


@dataclass(eq=False)
class GroundTruth:
    records: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def k_x(self):
        return np.array([r.k_x for r in self.records])


def _run(theta, n, seed, fixed_k=None):
    if n < 1:
        raise InvalidParameterError("horizon n must be at least 1")
    theta = as_model(theta)
    g = theta.glssm
    dx, dy = g.dx, g.dy
    kappa = theta.kappa
    scans, truth = [], GroundTruth()
    x = np.zeros((0, dx))
    zero_x = np.zeros(dx)
    zero_y = np.zeros(dy)
    for t in range(1, n + 1):
        if fixed_k is None:
            c_s = (_rng.stream(seed, t, _rng.SIM_DEATH).random(x.shape[0]) < theta.p_s)
            k_b = int(_rng.stream(seed, t, _rng.SIM_BIRTH).poisson(theta.lambda_b))
        else:
            c_s = np.ones(x.shape[0], dtype=bool)
            k_b = fixed_k if t == 1 else 0
        srng = _rng.stream(seed, t, _rng.SIM_STATE)
        xs = x[c_s]
        if xs.shape[0]:
            xs = xs @ g.F.T + srng.multivariate_normal(zero_x, g.W, size=xs.shape[0])
        xb = srng.multivariate_normal(g.mu_b, g.Sigma_b, size=k_b) if k_b else np.zeros((0, dx))
        x = np.concatenate([xs, xb])
        k_x = x.shape[0]
        drng = _rng.stream(seed, t, _rng.SIM_DETECT)
        c_d = drng.random(k_x) < theta.p_d
        yt = x @ g.G.T + drng.multivariate_normal(zero_y, g.V, size=k_x) if k_x else np.zeros((0, dy))
        inside = (np.abs(yt) <= kappa).all(axis=1)
        c_d &= inside
        ytg = yt[c_d]
        crng = _rng.stream(seed, t, _rng.SIM_CLUTTER)
        k_f = int(crng.poisson(theta.lambda_f))
        clutter = crng.uniform(-kappa, kappa, size=(k_f, dy))
        allobs = np.concatenate([ytg, clutter])
        perm = _rng.stream(seed, t, _rng.SIM_PERM).permutation(allobs.shape[0])
        points = np.empty_like(allobs)
        points[perm] = allobs          # observation k lands at scan index perm[k]
        a = perm[:ytg.shape[0]]
        rec = AssociationRecord(c_s=c_s, c_d=c_d, k_b=k_b, k_f=k_f, a=a)
        scans.append(ObservationScan(t, points))
        truth.records.append(rec)
        truth.states.append(x.copy())
    return scans, truth


def simulate(theta, n, seed):
    """Simulate ``n`` steps of the MTT model; returns ``(scans, truth)``."""
    return _run(theta, n, seed)


def simulate_fixed_k(theta, K, n, seed):
    """``K`` immortal targets born at ``t = 1``; no later births or deaths."""
    if K < 0:
        raise InvalidParameterError("K must be nonnegative")
    return _run(theta, n, seed, fixed_k=int(K))


# ----------------------------------------------------------------- JSON lines

def _dump(obj):
    return json.dumps(obj, separators=(", ", ": "))


def write_scans(path, scans):
    with open(path, "w", encoding="utf-8") as fh:
        for s in scans:
            pts = [[float(v) for v in p] for p in s.points]
            fh.write(_dump({"t": int(s.t), "y": pts}) + "\n")


def write_truth(path, truth):
    with open(path, "w", encoding="utf-8") as fh:
        for t, (rec, x) in enumerate(zip(truth.records, truth.states), start=1):
            d = {"t": t, **rec.to_dict(), "x": [[float(v) for v in row] for row in x]}
            fh.write(_dump(d) + "\n")


def _lines(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(str(exc), path=path) from exc
    for no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            yield no, json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid JSON ({exc.msg})", line=no, path=path) from exc


def read_scans(path, dy=2):
    scans = []
    for no, obj in _lines(path):
        try:
            t = int(obj["t"])
            y = np.asarray(obj["y"], dtype=float).reshape(-1, dy)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad scan record ({exc})", line=no, path=path) from exc
        if scans and t != scans[-1].t + 1:
            raise DataError(f"time index {t} does not follow {scans[-1].t}", line=no, path=path)
        scans.append(ObservationScan(t, y))
    return scans


def read_truth(path, dx=4):
    truth = GroundTruth()
    k_prev = 0
    for no, obj in _lines(path):
        try:
            rec = AssociationRecord(c_s=obj["c_s"], c_d=obj["c_d"], k_b=obj["k_b"],
                                    k_f=obj["k_f"], a=obj["a"])
            x = np.asarray(obj.get("x", []), dtype=float).reshape(-1, dx)
            rec.validate(k_prev=k_prev)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad truth record ({exc})", line=no, path=path) from exc
        truth.records.append(rec)
        truth.states.append(x)
        k_prev = rec.k_x
    return truth

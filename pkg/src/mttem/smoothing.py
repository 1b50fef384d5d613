"""Forward smoothing of the EM sufficient statistics.

For one target with filter moments ``(mu_t, Sigma_t)`` every element of
the seven state-dependent statistics is carried as a quadratic
``x' P x + q' x + r`` in the current state. The recursion needs only the
backward kernel ``x_t | x_{t+1} ~ N(B x_{t+1} + b, Sigma_cross)`` and is
exact: evaluating the quadratic against the filter gives the smoothed
expectation of the statistic.

The eleven quantities that do not depend on the states (observation
outer products and the counts of detections, targets, survivals, births,
false alarms and steps) are accumulated separately per particle.

Storage is "structure of arrays": the recursion variables of all targets
of all particles live in a few large arrays so a time step is a handful
of batched matrix products. Slots are numbered as follows.

==========  ===========================  ==================
statistic   quantity summed              slots
==========  ===========================  ==================
S1          detected ``x x'``            block 0 (dx*dx)
S3          ``x_{t-1} x_{t-1}'``          block 1
S4          ``x_t x_t'``                 block 2
S5          ``x_{t-1} x_t'``             block 3
S7          birth ``x x'``               block 4
S2          detected ``x y'``            next dx*dy
S6          birth ``x``                  last dx
==========  ===========================  ==================

Only the first five blocks carry a nonzero ``P``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numba
import numpy as np

from .exceptions import StructuralError
from .kalman import GaussianMoments, backward_arrays, predict_arrays, symmetrize, update_arrays

_PBLOCK = {1: 0, 3: 1, 4: 2, 5: 3, 7: 4}
Z_NAMES = ("S9", "S10", "S11", "S12", "S13", "S14", "S15")


@functools.lru_cache(maxsize=None)
def layout(dx, dy):
    return _Layout(dx, dy)


class _Layout:
    """Slot bookkeeping for given state/observation dimensions."""

    def __init__(self, dx, dy):
        self.dx, self.dy = dx, dy
        sq = dx * dx
        self.nP = 5 * sq
        self.off2 = self.nP
        self.off6 = self.nP + dx * dy
        self.nQ = self.off6 + dx
        self.nz = dy * dy + 7
        self.size = self.nQ + self.nz
        ii, jj = np.divmod(np.arange(sq), dx)
        self.I, self.J = ii, jj
        self.blk = {m: slice(b * sq, (b + 1) * sq) for m, b in _PBLOCK.items()}
        self.s = {m: np.arange(sq) + b * sq for m, b in _PBLOCK.items()}
        i2, j2 = np.divmod(np.arange(dx * dy), dy)
        self.I2, self.J2 = i2, j2
        self.s2 = self.off2 + np.arange(dx * dy)
        self.s6 = self.off6 + np.arange(dx)
        m_of = np.empty(self.nQ, dtype=int)
        for m, b in _PBLOCK.items():
            m_of[b * sq:(b + 1) * sq] = m
        m_of[self.off2:self.off6] = 2
        m_of[self.off6:] = 6
        self.m_of_slot = m_of

    def slot_gamma(self, gamma_by_m):
        """Per-slot step sizes from a length-7 array indexed by ``m - 1``."""
        return np.asarray(gamma_by_m, dtype=float)[self.m_of_slot - 1]

    def x_blocks(self, v):
        """Split the ``nQ`` slot values into the seven statistics."""
        dx, dy = self.dx, self.dy
        out = {m: v[..., self.blk[m]].reshape(v.shape[:-1] + (dx, dx)) for m in _PBLOCK}
        out[2] = v[..., self.off2:self.off6].reshape(v.shape[:-1] + (dx, dy))
        out[6] = v[..., self.off6:self.nQ]
        return out


# ------------------------------------------------------------------ stat sets

class SufficientStatSet:
    """Expected sufficient statistics ``S1..S15``.

    Stored as one flat vector so that particle averages and
    stochastic-approximation blends are plain vector arithmetic.
    """

    __slots__ = ("vec", "dx", "dy")

    def __init__(self, vec, dx=4, dy=2):
        self.vec = np.asarray(vec, dtype=float)
        self.dx, self.dy = dx, dy
        if self.vec.shape != (layout(dx, dy).size,):
            raise ValueError(f"stat vector has shape {self.vec.shape}")

    @classmethod
    def zeros(cls, dx=4, dy=2):
        return cls(np.zeros(layout(dx, dy).size), dx, dy)

    @classmethod
    def from_parts(cls, S1, S2, S3, S4, S5, S6, S7, S8, S9, S10, S11, S12, S13, S14, S15):
        S1 = np.asarray(S1, float)
        dx, dy = S1.shape[0], np.shape(S8)[0]
        L = layout(dx, dy)
        v = np.zeros(L.size)
        for m, S in ((1, S1), (3, S3), (4, S4), (5, S5), (7, S7)):
            v[L.blk[m]] = np.asarray(S, float).ravel()
        v[L.off2:L.off6] = np.asarray(S2, float).ravel()
        v[L.off6:L.nQ] = np.asarray(S6, float).ravel()
        v[L.nQ:L.nQ + dy * dy] = np.asarray(S8, float).ravel()
        v[L.nQ + dy * dy:] = [S9, S10, S11, S12, S13, S14, S15]
        return cls(v, dx, dy)

    @property
    def _L(self):
        return layout(self.dx, self.dy)

    def _sq(self, m):
        return self.vec[self._L.blk[m]].reshape(self.dx, self.dx)

    S1 = property(lambda s: s._sq(1))
    S3 = property(lambda s: s._sq(3))
    S4 = property(lambda s: s._sq(4))
    S5 = property(lambda s: s._sq(5))
    S7 = property(lambda s: s._sq(7))
    S2 = property(lambda s: s.vec[s._L.off2:s._L.off6].reshape(s.dx, s.dy))
    S6 = property(lambda s: s.vec[s._L.off6:s._L.nQ])
    S8 = property(lambda s: s.vec[s._L.nQ:s._L.nQ + s.dy * s.dy].reshape(s.dy, s.dy))

    def _z(self, k):
        return float(self.vec[self._L.nQ + self.dy * self.dy + k])

    S9 = property(lambda s: s._z(0))
    S10 = property(lambda s: s._z(1))
    S11 = property(lambda s: s._z(2))
    S12 = property(lambda s: s._z(3))
    S13 = property(lambda s: s._z(4))
    S14 = property(lambda s: s._z(5))
    S15 = property(lambda s: s._z(6))

    def __add__(self, other):
        return SufficientStatSet(self.vec + other.vec, self.dx, self.dy)

    def __mul__(self, c):
        return SufficientStatSet(self.vec * c, self.dx, self.dy)

    __rmul__ = __mul__

    def blend(self, new, gamma):
        """``(1 - gamma) * self + gamma * new``."""
        return SufficientStatSet((1.0 - gamma) * self.vec + gamma * new.vec, self.dx, self.dy)

    def allclose(self, other, rtol=1e-8, atol=0.0):
        return np.allclose(self.vec, other.vec, rtol=rtol, atol=atol)

    def __repr__(self):
        return (f"SufficientStatSet(S9={self.S9:.4g}, S10={self.S10:.4g}, "
                f"S11={self.S11:.4g}, S13={self.S13:.4g}, S15={self.S15:.4g})")


# ----------------------------------------------------- single-target recursions

@dataclass(eq=False)
class RecursionVars:
    """``P``: ``(..., dx, nP, dx)``, ``q``: ``(..., nQ, dx)``, ``r``: ``(..., nQ)``."""

    P: np.ndarray
    q: np.ndarray
    r: np.ndarray

    @property
    def dx(self):
        return self.q.shape[-1]


def _init_arrays(L, n, c_d, Y, scale):
    """Initial recursion variables for ``n`` newly born targets.

    ``c_d`` is ``(n,)``, ``Y`` ``(n, dy)`` (rows ignored when ``c_d`` is 0),
    ``scale`` is a per-slot factor (``(nQ,)``) or 1.
    """
    dx = L.dx
    P = np.zeros((n, dx, L.nP, dx))
    q = np.zeros((n, L.nQ, dx))
    r = np.zeros((n, L.nQ))
    sc = np.broadcast_to(np.asarray(scale, float), (L.nQ,))
    cd = np.asarray(c_d, float)
    P[:, L.I, L.s[1], L.J] = cd[:, None] * sc[L.s[1]]
    P[:, L.I, L.s[7], L.J] = sc[L.s[7]]
    q[:, L.s2, L.I2] = (cd[:, None] * Y[:, L.J2]) * sc[L.s2]
    q[:, L.s6, np.arange(dx)] = sc[L.s6]
    return P, q, r


def _step_arrays(L, P, q, r, B, b, Sc, c_d, Y, carry, fresh):
    """One forward-smoothing step for a batch of targets.

    ``B, b, Sc`` are the backward kernel from the previous filter; ``c_d``
    and ``Y`` describe the new time step. ``carry`` and ``fresh`` are
    per-slot multipliers (arrays of length ``nQ``) or ``None`` for 1.
    """
    n, dx, nP = q.shape[0], L.dx, L.nP
    if n == 0:
        return P, q, r
    Pf = P.reshape(n, dx * nP, dx)
    Pb = (Pf @ b[:, :, None]).reshape(n, dx, nP)                   # [a, k]
    Ptb = (b[:, None, :] @ P.reshape(n, dx, nP * dx)).reshape(n, nP, dx)
    r_new = r + (q * b[:, None, :]).sum(-1)
    r_new[:, :nP] += np.einsum("makb,mba->mk", P, Sc) + (Pb * b[:, :, None]).sum(1)
    v = q.copy()
    v[:, :nP] += Pb.transpose(0, 2, 1) + Ptb
    q_new = v @ B
    PB = (Pf @ B).reshape(n, dx, nP * dx)
    P_new = (np.swapaxes(B, 1, 2) @ PB).reshape(n, dx, nP, dx)
    if carry is not None:
        P_new *= carry[None, None, :nP, None]
        q_new *= carry[None, :, None]
        r_new *= carry[None, :]
        f = fresh
    else:
        f = np.ones(L.nQ)
    cd = np.asarray(c_d, float)
    I, J = L.I, L.J
    # S1: c_d e_i e_j'
    P_new[:, I, L.s[1], J] += cd[:, None] * f[L.s[1]]
    # S2: c_d y_j e_i
    q_new[:, L.s2, L.I2] += (cd[:, None] * Y[:, L.J2]) * f[L.s2]
    # S3: E[x_t x_t' | x_{t+1}]
    f3 = f[L.s[3]]
    BI, BJ = B[:, I, :], B[:, J, :]                                # (n, sq, dx)
    P_new[:, :, L.blk[3], :] += (BI.transpose(0, 2, 1)[:, :, :, None]
                                 * BJ[:, None, :, :]) * f3[None, None, :, None]
    q_new[:, L.s[3], :] += (BI * b[:, J, None] + BJ * b[:, I, None]) * f3[None, :, None]
    r_new[:, L.s[3]] += (Sc[:, I, J] + b[:, I] * b[:, J]) * f3
    # S4: e_i e_j'
    P_new[:, I, L.s[4], J] += f[L.s[4]]
    # S5: E[x_t(i) | x_{t+1}] x_{t+1}(j)
    f5 = f[L.s[5]]
    P_new[:, :, L.s[5], J] += BI.transpose(0, 2, 1) * f5[None, None, :]
    q_new[:, L.s[5], J] += b[:, I] * f5
    return P_new, q_new, r_new


@numba.njit(cache=True)
def _btpb4(Pi, Bs, carry, Q, Pn):
    """``Pn[:, k, :] = carry[k] * B' Pi[:, k, :] B`` for ``dx = 4``."""
    nP = Pi.shape[1]
    b00, b01, b02, b03 = Bs[0, 0], Bs[0, 1], Bs[0, 2], Bs[0, 3]
    b10, b11, b12, b13 = Bs[1, 0], Bs[1, 1], Bs[1, 2], Bs[1, 3]
    b20, b21, b22, b23 = Bs[2, 0], Bs[2, 1], Bs[2, 2], Bs[2, 3]
    b30, b31, b32, b33 = Bs[3, 0], Bs[3, 1], Bs[3, 2], Bs[3, 3]
    for a in range(4):
        for k in range(nP):
            x0, x1, x2, x3 = Pi[a, k, 0], Pi[a, k, 1], Pi[a, k, 2], Pi[a, k, 3]
            Q[a, k, 0] = x0 * b00 + x1 * b10 + x2 * b20 + x3 * b30
            Q[a, k, 1] = x0 * b01 + x1 * b11 + x2 * b21 + x3 * b31
            Q[a, k, 2] = x0 * b02 + x1 * b12 + x2 * b22 + x3 * b32
            Q[a, k, 3] = x0 * b03 + x1 * b13 + x2 * b23 + x3 * b33
    for d in range(4):
        w0, w1, w2, w3 = Bs[0, d], Bs[1, d], Bs[2, d], Bs[3, d]
        for k in range(nP):
            c = carry[k]
            for e in range(4):
                Pn[d, k, e] = c * (w0 * Q[0, k, e] + w1 * Q[1, k, e]
                                   + w2 * Q[2, k, e] + w3 * Q[3, k, e])


@numba.njit(cache=True)
def _btpb(Pi, Bs, carry, Q, Pn):
    dx, nP = Pi.shape[0], Pi.shape[1]
    for a in range(dx):
        for k in range(nP):
            for e in range(dx):
                acc = 0.0
                for bb in range(dx):
                    acc += Pi[a, k, bb] * Bs[bb, e]
                Q[a, k, e] = acc
    for d in range(dx):
        for k in range(nP):
            c = carry[k]
            for e in range(dx):
                acc = 0.0
                for a in range(dx):
                    acc += Bs[a, d] * Q[a, k, e]
                Pn[d, k, e] = c * acc


@numba.njit(cache=True)
def _step_kernel(P, q, r, src, dst, B, b, Sc, cd, Y, carry, fresh, Po, qo, ro):
    """Compiled twin of :func:`_step_arrays` writing into preallocated output.

    Target ``s`` of the step reads row ``src[s]`` of ``P, q, r`` and writes
    row ``dst[s]`` of ``Po, qo, ro``; ``B, b, Sc, cd, Y`` are indexed by ``s``.
    """
    dx = B.shape[1]
    nP = P.shape[2]
    nQ = q.shape[1]
    dy = Y.shape[1]
    sq = dx * dx
    Q = np.empty((dx, nP, dx))
    pb = np.empty((dx, nP))
    ptb = np.empty((nP, dx))
    rk = np.empty(nP)
    for s in range(src.shape[0]):
        i0 = src[s]
        o = dst[s]
        Bs = B[s]
        bs = b[s]
        Pi = P[i0]
        if dx == 4:
            _btpb4(Pi, Bs, carry, Q, Po[o])
        else:
            _btpb(Pi, Bs, carry, Q, Po[o])
        # P b, b' P and tr(P Sc) per slot, in one sweep over P
        for k in range(nP):
            rk[k] = r[i0, k]
            for e in range(dx):
                ptb[k, e] = 0.0
        for a in range(dx):
            w = bs[a]
            for k in range(nP):
                acc = 0.0
                tr = 0.0
                for bb in range(dx):
                    x = Pi[a, k, bb]
                    acc += x * bs[bb]
                    tr += x * Sc[s, bb, a]
                    ptb[k, bb] += w * x
                pb[a, k] = acc
                rk[k] += tr + w * acc
        for k in range(nP):
            c = carry[k]
            rr = rk[k]
            for a in range(dx):
                rr += q[i0, k, a] * bs[a]
            ro[o, k] = c * rr
            for e in range(dx):
                acc = 0.0
                for a in range(dx):
                    acc += Bs[a, e] * (q[i0, k, a] + pb[a, k] + ptb[k, a])
                qo[o, k, e] = c * acc
        for k in range(nP, nQ):
            c = carry[k]
            rr = r[i0, k]
            for a in range(dx):
                rr += q[i0, k, a] * bs[a]
            ro[o, k] = c * rr
            for e in range(dx):
                acc = 0.0
                for a in range(dx):
                    acc += Bs[a, e] * q[i0, k, a]
                qo[o, k, e] = c * acc
        for i in range(dx):
            for j in range(dx):
                ij = i * dx + j
                k1, k3, k4, k5 = ij, sq + ij, 2 * sq + ij, 3 * sq + ij
                Po[o, i, k1, j] += fresh[k1] * cd[s]
                f3 = fresh[k3]
                for a in range(dx):
                    for bb in range(dx):
                        Po[o, a, k3, bb] += f3 * Bs[i, a] * Bs[j, bb]
                    qo[o, k3, a] += f3 * (Bs[i, a] * bs[j] + Bs[j, a] * bs[i])
                ro[o, k3] += f3 * (Sc[s, i, j] + bs[i] * bs[j])
                Po[o, i, k4, j] += fresh[k4]
                f5 = fresh[k5]
                for a in range(dx):
                    Po[o, a, k5, j] += f5 * Bs[i, a]
                qo[o, k5, j] += f5 * bs[i]
            for j in range(dy):
                k2 = nP + i * dy + j
                qo[o, k2, i] += fresh[k2] * cd[s] * Y[s, j]


@numba.njit(cache=True)
def _eval_add(P, q, r, mu, Sigma, rows, owner, out):
    """``out[owner[i]] += `` slot values of target ``rows[i]``."""
    dx = mu.shape[1]
    nP = P.shape[2]
    nQ = q.shape[1]
    Ex = np.empty((dx, dx))
    for i in range(rows.shape[0]):
        m = rows[i]
        o = owner[i]
        for a in range(dx):
            for bb in range(dx):
                Ex[a, bb] = Sigma[m, a, bb] + mu[m, a] * mu[m, bb]
        for k in range(nQ):
            acc = r[m, k]
            for a in range(dx):
                acc += q[m, k, a] * mu[m, a]
            out[o, k] += acc
        for a in range(dx):
            for k in range(nP):
                acc = 0.0
                for bb in range(dx):
                    acc += P[m, a, k, bb] * Ex[bb, a]
                out[o, k] += acc


def _eval_arrays(L, P, q, r, mu, Sigma):
    """Slot values ``tr(P (Sigma + mu mu')) + q' mu + r`` for a batch."""
    Ex = Sigma + mu[:, :, None] * mu[:, None, :]
    v = (q * mu[:, None, :]).sum(-1) + r
    v[:, :L.nP] += np.einsum("makb,mba->mk", P, Ex)
    return v


def _blocks_dict(L, v):
    blocks = L.x_blocks(v)
    return {f"S{m}": blocks[m] for m in sorted(blocks)}


def init_vars(c_d, y=None, dx=4, dy=2, scale=1.0):
    """Recursion variables of a target at its first time step.

    Parameters
    ----------
    c_d : int
        1 if the target is detected at this step.
    y : array of shape ``(dy,)`` or None
        Associated observation; required exactly when ``c_d`` is 1.
    """
    if bool(c_d) != (y is not None):
        raise ValueError("y must be given exactly when c_d = 1")
    L = layout(dx, dy)
    Y = np.zeros((1, dy)) if y is None else np.asarray(y, float).reshape(1, dy)
    P, q, r = _init_arrays(L, 1, [float(c_d)], Y, scale)
    return RecursionVars(P[0], q[0], r[0])


def step_vars(vars, bp, c_d, y=None, gamma=None, dy=2):
    """Advance recursion variables by one step.

    ``gamma=None`` runs the plain recursion (statistics are sums over
    time). A number in ``(0, 1]`` runs the stochastic-approximation form:
    carried terms are multiplied by ``1 - gamma`` and fresh increments by
    ``gamma``.
    """
    if bool(c_d) != (y is not None):
        raise ValueError("y must be given exactly when c_d = 1")
    dx = vars.dx
    L = layout(dx, dy)
    Y = np.zeros((1, dy)) if y is None else np.asarray(y, float).reshape(1, dy)
    if gamma is None:
        carry = fresh = None
    else:
        g = np.broadcast_to(np.asarray(gamma, float), (L.nQ,))
        carry, fresh = 1.0 - g, g
    P, q, r = _step_arrays(L, vars.P[None], vars.q[None], vars.r[None],
                           np.asarray(bp.B, float)[None], np.asarray(bp.b, float)[None],
                           np.asarray(bp.Sigma_cross, float)[None], [float(c_d)], Y,
                           carry, fresh)
    return RecursionVars(P[0], q[0], r[0])


def eval_statistic(vars, filt, dy=2):
    """Smoothed values of the seven statistics carried by ``vars``.

    Returns a dict ``{"S1": ..., ..., "S7": ...}``.
    """
    L = layout(vars.dx, dy)
    v = _eval_arrays(L, vars.P[None], vars.q[None], vars.r[None],
                     np.asarray(filt.mu, float)[None], np.asarray(filt.Sigma, float)[None])
    return _blocks_dict(L, v[0])


# ------------------------------------------------------------ multi-target bank

@dataclass(eq=False)
class StepWeights:
    """Stochastic-approximation weights of one time step.

    ``x_gamma`` is per slot (``(nQ,)``) and ``z_gamma`` per z-statistic
    group (``(G,)``). ``None`` for either selects the plain recursion.
    """

    x_gamma: np.ndarray | None = None
    z_gamma: np.ndarray | None = None


PLAIN = StepWeights()


class SmootherBank:
    """Smoothing states of ``N`` association hypotheses, stored jointly.

    Targets of particle ``p`` occupy rows ``start[p]:start[p+1]`` of the
    target arrays, survivors first in their previous order and births
    after them.
    """

    def __init__(self, n_particles, dx=4, dy=2, n_groups=1):
        L = layout(dx, dy)
        self.L = L
        self.N = int(n_particles)
        self.G = int(n_groups)
        self.owner = np.zeros(0, dtype=np.int64)
        self.mu = np.zeros((0, dx))
        self.Sigma = np.zeros((0, dx, dx))
        self.P = np.zeros((0, dx, L.nP, dx))
        self.q = np.zeros((0, L.nQ, dx))
        self.r = np.zeros((0, L.nQ))
        self.dead = np.zeros((self.N, L.nQ))
        self.z = np.zeros((self.N, self.G, L.nz))
        self.t = 0
        self._pending = None

    # -- bookkeeping
    @property
    def counts(self):
        return np.bincount(self.owner, minlength=self.N)

    @property
    def start(self):
        return np.concatenate([[0], np.cumsum(self.counts)])

    def select(self, ancestors):
        """New bank whose particle ``i`` is a copy of particle ``ancestors[i]``."""
        anc = np.asarray(ancestors, dtype=np.int64)
        cnt = self.counts
        st = self.start
        n_new = cnt[anc]
        rows = (np.repeat(st[anc] - np.cumsum(n_new) + n_new, n_new)
                + np.arange(n_new.sum()))
        out = object.__new__(SmootherBank)
        out.L, out.N, out.G, out.t = self.L, anc.size, self.G, self.t
        out.owner = np.repeat(np.arange(anc.size), n_new)
        out.mu = self.mu[rows]
        out.Sigma = self.Sigma[rows]
        out.P = self.P[rows]
        out.q = self.q[rows]
        out.r = self.r[rows]
        out.dead = self.dead[anc]
        out.z = self.z[anc]
        out._pending = None
        return out

    # -- one step, split in two halves around the association
    def advance(self, psi, c_s, k_b, weights=PLAIN):
        """Apply survival/birth decisions and predict the new targets.

        Parameters
        ----------
        psi : GlssmParams
        c_s : array of 0/1, one entry per current target (bank order)
        k_b : array, births per particle

        Returns the predicted moments ``(mu, Sigma)`` and owners of the new
        target set, in the order :meth:`correct` expects.
        """
        L = self.L
        c_s = np.asarray(c_s, dtype=bool)
        k_b = np.asarray(k_b, dtype=np.int64)
        if c_s.shape != self.owner.shape:
            raise StructuralError(
                f"survival vector has length {c_s.size}, bank holds {self.owner.size} targets")
        if k_b.shape != (self.N,) or (k_b < 0).any():
            raise StructuralError("k_b must hold one nonnegative count per particle")
        dying = ~c_s
        if dying.any():
            rows = np.flatnonzero(dying)
            _eval_add(self.P, self.q, self.r, self.mu, self.Sigma, rows,
                      self.owner[rows], self.dead)
        if weights.x_gamma is not None:
            self.dead *= (1.0 - weights.x_gamma)[None, :]
        mu_s, Sig_s = self.mu[c_s], self.Sigma[c_s]
        if mu_s.shape[0]:
            B, b, Sc = backward_arrays(mu_s, Sig_s, psi.F, psi.W)
            mu_p, Sig_p = predict_arrays(mu_s, Sig_s, psi.F, psi.W)
        else:
            dx = L.dx
            B = np.zeros((0, dx, dx)); b = np.zeros((0, dx)); Sc = np.zeros((0, dx, dx))
            mu_p, Sig_p = np.zeros((0, dx)), np.zeros((0, dx, dx))
        nb = int(k_b.sum())
        own_s = self.owner[c_s]
        own_b = np.repeat(np.arange(self.N), k_b)
        owner = np.concatenate([own_s, own_b])
        order = np.argsort(owner, kind="stable")
        is_birth = np.concatenate([np.zeros(own_s.size, bool), np.ones(nb, bool)])[order]
        mu_new = np.concatenate([mu_p, np.broadcast_to(psi.mu_b, (nb, L.dx))])[order]
        Sig_new = np.concatenate([Sig_p, np.broadcast_to(psi.Sigma_b, (nb, L.dx, L.dx))])[order]
        k_prev = self.counts
        k_s = np.bincount(own_s, minlength=self.N)
        self._pending = dict(
            owner=owner[order], order=order, n_surv=own_s.size, is_birth=is_birth,
            B=B, b=b, Sc=Sc, mu=mu_new, Sigma=Sig_new, k_prev=k_prev, k_s=k_s, k_b=k_b,
            weights=weights, src=np.flatnonzero(c_s),
        )
        return mu_new, Sig_new, owner[order]

    def correct(self, psi, Y, obs, weights=None):
        """Measurement update and statistic recursion for the new targets.

        ``obs[k]`` is the observation index of new target ``k`` or ``-1``
        for a missed detection; ``Y`` is the ``(k_y, dy)`` scan, shared by
        all particles.
        """
        pend = self._pending
        if pend is None:
            raise StructuralError("correct() called without a preceding advance()")
        self._pending = None
        L = self.L
        w = pend["weights"] if weights is None else weights
        obs = np.asarray(obs, dtype=np.int64)
        Y = np.asarray(Y, dtype=float).reshape(-1, L.dy)
        M = pend["owner"].size
        if obs.shape != (M,):
            raise StructuralError(f"got {obs.size} association entries for {M} targets")
        if (obs >= Y.shape[0]).any():
            raise StructuralError("association index exceeds the scan size")
        det = obs >= 0
        own = pend["owner"]
        # per particle, no observation may be used twice
        if det.any():
            key = own[det] * (Y.shape[0] + 1) + obs[det]
            if np.unique(key).size != key.size:
                raise StructuralError("an observation is assigned to two targets")
        mu, Sigma = pend["mu"].copy(), pend["Sigma"].copy()
        Ytg = np.zeros((M, L.dy))
        Ytg[det] = Y[obs[det]]
        if det.any():
            mu[det], Sigma[det], _ = update_arrays(mu[det], Sigma[det], Ytg[det], psi.G, psi.V)
        cd = det.astype(float)

        # recursion for survivors, in pre-sort order then permuted
        order, ns = pend["order"], pend["n_surv"]
        inv = np.empty_like(order)
        inv[order] = np.arange(order.size)
        pos_s = inv[:ns]                       # new positions of the survivors
        pos_b = inv[ns:]
        dx = L.dx
        P = np.empty((M, dx, L.nP, dx))
        q = np.empty((M, L.nQ, dx))
        r = np.empty((M, L.nQ))
        xg = w.x_gamma
        carry = None if xg is None else 1.0 - xg
        fresh = xg
        if ns:
            ones = np.ones(L.nQ)
            _step_kernel(self.P, self.q, self.r, pend["src"], pos_s, pend["B"], pend["b"],
                         pend["Sc"], cd[pos_s], np.ascontiguousarray(Ytg[pos_s]),
                         ones if carry is None else carry, ones if fresh is None else fresh,
                         P, q, r)
        if pos_b.size:
            sc = 1.0 if xg is None else xg
            P[pos_b], q[pos_b], r[pos_b] = _init_arrays(L, pos_b.size, cd[pos_b], Ytg[pos_b], sc)
        self.P, self.q, self.r = P, q, r
        self.mu, self.Sigma = mu, Sigma
        self.owner = own

        # state-free statistics
        N, dy = self.N, L.dy
        s = np.zeros((N, L.nz))
        if det.any():
            yy = (Ytg[det][:, :, None] * Ytg[det][:, None, :]).reshape(-1, dy * dy)
            np.add.at(s, (own[det][:, None], np.arange(dy * dy)[None, :]), yy)
        k_d = np.bincount(own[det], minlength=N)
        k_x = np.bincount(own, minlength=N)
        k_f = Y.shape[0] - k_d
        s[:, dy * dy:] = np.stack(
            [k_d, k_x, pend["k_s"], pend["k_prev"], pend["k_b"], k_f, np.ones(N)], axis=1)
        if w.z_gamma is None:
            self.z += s[:, None, :]
        else:
            zg = np.asarray(w.z_gamma, float)[None, :, None]
            self.z = (1.0 - zg) * self.z + zg * s[:, None, :]
        self.t += 1

    def step(self, psi, c_s, k_b, Y, obs, weights=PLAIN):
        """Full step with a known association (``advance`` then ``correct``)."""
        self.advance(psi, c_s, k_b, weights)
        self.correct(psi, Y, obs)

    # -- statistics
    def particle_totals(self):
        """Per-particle statistic vectors, ``(N, G, size)``."""
        L = self.L
        x = self.dead.copy()
        if self.owner.size:
            _eval_add(self.P, self.q, self.r, self.mu, self.Sigma,
                      np.arange(self.owner.size), self.owner, x)
        out = np.empty((self.N, self.G, L.size))
        out[:, :, :L.nQ] = x[:, None, :]
        out[:, :, L.nQ:] = self.z
        return out

    def expectations(self, weights=None):
        """Weighted average over particles; returns one stat set per group."""
        tot = self.particle_totals()
        if weights is None:
            avg = tot.mean(0)
        else:
            w = np.asarray(weights, float)
            avg = np.tensordot(w / w.sum(), tot, axes=1)
        out = []
        for g in range(self.G):
            v = _symmetrize_vec(self.L, avg[g])
            out.append(SufficientStatSet(v, self.L.dx, self.L.dy))
        return out


def _symmetrize_vec(L, v):
    v = v.copy()
    for m in (1, 3, 4, 7):
        blk = v[L.blk[m]].reshape(L.dx, L.dx)
        v[L.blk[m]] = symmetrize(blk).ravel()
    return v


# ------------------------------------------------------------ known association

def mtt_step(bank, record, scan, theta, gamma=None):
    """Advance a one-particle bank along a known association record.

    ``gamma=None`` accumulates plain sums; a number applies the same
    stochastic-approximation step size to every statistic.
    """
    if bank.N != 1:
        raise StructuralError("mtt_step drives a single hypothesis")
    g = theta.glssm
    L = bank.L
    if gamma is None:
        w = PLAIN
    else:
        w = StepWeights(x_gamma=np.full(L.nQ, float(gamma)), z_gamma=np.full(bank.G, float(gamma)))
    Y = np.asarray(getattr(scan, "points", scan), dtype=float).reshape(-1, L.dy)
    bank.step(g, np.asarray(record.c_s, bool), [record.k_b], Y, record.obs_index(), w)
    return bank


def total_expectations(bank):
    """Alive plus dead statistics of a one-particle bank."""
    return bank.expectations()[0]

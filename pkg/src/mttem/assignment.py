"""Cost matrices, optimal assignment and Murty's L-best ranking.

Rows index targets and columns index observations followed by one
private "miss" column per target, so an assignment ``alpha`` maps target
``i`` to an observation ``alpha[i] < k_y`` or to its miss column
``k_y + i``. Indices are 0-based throughout.

The solvers are compiled with numba. Forbidden entries (``-inf`` in ``D``)
are replaced by a large finite sentinel sized from the finite entries of
each sub-problem, and a solution is rejected when it uses one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .kalman import predictive_loglik_matrix

PD_CLAMP = 1e-6


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Log-score matrix ``D`` of shape ``(k_x, k_y + k_x)``."""

    D: np.ndarray

    @property
    def k_x(self):
        return self.D.shape[0]

    @property
    def k_y(self):
        return self.D.shape[1] - self.D.shape[0]


@dataclass(frozen=True, eq=False)
class Assignment:
    alpha: np.ndarray
    score: float


@dataclass(frozen=True, eq=False)
class AssociationFragment:
    """Detection part of an association record decoded from an assignment."""

    c_d: np.ndarray
    a: np.ndarray
    k_d: int
    k_f: int


def _as_matrix(D):
    if isinstance(D, CostMatrix):
        D = D.D
    D = np.ascontiguousarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[1] < D.shape[0]:
        raise ValueError(f"cost matrix must be k_x x (k_y + k_x), got {D.shape}")
    return D


def clamp_pd(p_d):
    return min(max(p_d, PD_CLAMP), 1.0 - PD_CLAMP)


def score_shifts(theta):
    """Detection and miss offsets of the cost matrix.

    Returns ``(log p_d, log((1 - p_d) lambda_f / |Y|))`` with ``p_d``
    clamped away from 0 and 1.
    """
    p_d = clamp_pd(theta.p_d)
    lam = max(theta.lambda_f, 1e-300)
    return math.log(p_d), math.log(1.0 - p_d) + math.log(lam / theta.region_volume)


def build_cost_matrix(preds, theta, scan):
    """Assemble ``D`` for predicted target moments and one scan.

    Parameters
    ----------
    preds : GaussianMoments or sequence of GaussianMoments
        Predicted moments of the ``k_x`` targets (stacked or as a list).
    theta : ModelParams
    scan : ObservationScan or array of shape ``(k_y, d_y)``
    """
    Y = np.asarray(getattr(scan, "points", scan), dtype=float)
    g = theta.glssm
    Y = Y.reshape(-1, g.dy)
    if isinstance(preds, (list, tuple)):
        mu = np.array([p.mu for p in preds], dtype=float).reshape(-1, g.dx)
        Sigma = np.array([p.Sigma for p in preds], dtype=float).reshape(-1, g.dx, g.dx)
    else:
        mu = np.asarray(preds.mu, float).reshape(-1, g.dx)
        Sigma = np.asarray(preds.Sigma, float).reshape(-1, g.dx, g.dx)
    kx, ky = mu.shape[0], Y.shape[0]
    det, miss = score_shifts(theta)
    D = np.full((kx, ky + kx), -np.inf)
    if kx and ky:
        D[:, :ky] = det + predictive_loglik_matrix(mu, Sigma, Y, g.G, g.V)
    D[np.arange(kx), ky + np.arange(kx)] = miss
    return CostMatrix(D)


# ---------------------------------------------------------------- numba core

@numba.njit(cache=True)
def _hungarian(C, col):
    """Minimum-cost assignment of every row of ``C`` (n <= m); fills ``col``."""
    n, m = C.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    minv = np.empty(m + 1)
    used = np.empty(m + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = C[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    for j in range(1, m + 1):
        if p[j] != 0:
            col[p[j] - 1] = j - 1


@numba.njit(cache=True)
def _solve_sub(D, forced, excl, big, C, allowed, col):
    """Best assignment of ``D`` under forced arcs and exclusions.

    Returns the score, or ``-inf`` if no admissible assignment exists.
    """
    n, m = D.shape
    for i in range(n):
        for j in range(m):
            allowed[i, j] = np.isfinite(D[i, j]) and not excl[i, j]
    for i in range(n):
        f = forced[i]
        if f >= 0:
            for j in range(m):
                if j != f:
                    allowed[i, j] = False
            for k in range(n):
                if k != i:
                    allowed[k, f] = False
    for i in range(n):
        ok = False
        for j in range(m):
            if allowed[i, j]:
                ok = True
                break
        if not ok:
            return -np.inf
    for i in range(n):
        for j in range(m):
            C[i, j] = -D[i, j] if allowed[i, j] else big
    _hungarian(C, col)
    s = 0.0
    for i in range(n):
        if not allowed[i, col[i]]:
            return -np.inf
        s += D[i, col[i]]
    return s


@numba.njit(cache=True)
def _sentinel(D):
    n, m = D.shape
    a = 0.0
    for i in range(n):
        for j in range(m):
            if np.isfinite(D[i, j]) and abs(D[i, j]) > a:
                a = abs(D[i, j])
    return 4.0 * (n + 1) * (a + 1.0)


@numba.njit(cache=True)
def _lex_less(x, y):
    for k in range(x.shape[0]):
        if x[k] != y[k]:
            return x[k] < y[k]
    return False


@numba.njit(cache=True)
def _murty(D, L, out_alpha, out_score):
    """Write the ``L`` best assignments of ``D``; returns how many exist."""
    n, m = D.shape
    if n == 0:
        out_score[0] = 0.0
        return 1
    big = _sentinel(D)
    cap = L * n + 1
    forced = np.full((cap, n), -1, dtype=np.int64)
    excl = np.zeros((cap, n, m), dtype=np.bool_)
    alpha = np.empty((cap, n), dtype=np.int64)
    score = np.empty(cap)
    live = np.zeros(cap, dtype=np.bool_)
    C = np.empty((n, m))
    allowed = np.empty((n, m), dtype=np.bool_)
    col = np.empty(n, dtype=np.int64)
    cur = np.empty(n, dtype=np.int64)

    s = _solve_sub(D, forced[0], excl[0], big, C, allowed, col)
    if s == -np.inf:
        return 0
    alpha[0, :] = col
    score[0] = s
    live[0] = True
    used = 1
    nout = 0
    while nout < L:
        b = -1
        for k in range(used):
            if live[k]:
                if b < 0 or score[k] > score[b] or (
                        score[k] == score[b] and _lex_less(alpha[k], alpha[b])):
                    b = k
        if b < 0:
            break
        live[b] = False
        for i in range(n):
            out_alpha[nout, i] = alpha[b, i]
        out_score[nout] = score[b]
        nout += 1
        if nout == L:
            break
        cur[:] = forced[b]
        for r in range(n):
            if forced[b, r] >= 0:
                continue
            c = used
            forced[c, :] = cur
            excl[c] = excl[b]
            excl[c, r, alpha[b, r]] = True
            s = _solve_sub(D, forced[c], excl[c], big, C, allowed, col)
            if s > -np.inf:
                alpha[c, :] = col
                score[c] = s
                live[c] = True
                used += 1
            cur[r] = alpha[b, r]
    return nout


@numba.njit(cache=True)
def _assoc_kernel(ll, start, nx, ky, det, miss, L, u, out_alpha, out_logsum, out_count):
    """L-best association for every particle of a bank.

    ``ll`` holds the predictive log-likelihood rows of all targets
    (``(M, ky)``); particle ``p`` owns rows ``start[p]:start[p] + nx[p]``.
    Each particle's assignment is drawn with probability proportional to
    ``exp(score)`` over its L-best list using the uniform ``u[p]``.
    """
    maxn = 0
    for p in range(nx.shape[0]):
        if nx[p] > maxn:
            maxn = nx[p]
    alphas = np.empty((L, maxn), dtype=np.int64)
    scores = np.empty(L)
    for p in range(nx.shape[0]):
        n = nx[p]
        s0 = start[p]
        D = np.full((n, ky + n), -np.inf)
        for i in range(n):
            for j in range(ky):
                D[i, j] = det + ll[s0 + i, j]
            D[i, ky + i] = miss
        cnt = _murty(D, L, alphas, scores)
        out_count[p] = cnt
        if cnt == 0:
            out_logsum[p] = -np.inf
            for i in range(n):
                out_alpha[s0 + i] = -1
            continue
        mx = scores[0]
        tot = 0.0
        for k in range(cnt):
            tot += np.exp(scores[k] - mx)
        lse = mx + np.log(tot)
        out_logsum[p] = lse
        pick = cnt - 1
        acc = 0.0
        for k in range(cnt):
            acc += np.exp(scores[k] - lse)
            if u[p] < acc:
                pick = k
                break
        for i in range(n):
            out_alpha[s0 + i] = alphas[pick, i]


# ---------------------------------------------------------------- public API

def murty_lbest(D, L):
    """The ``min(L, #feasible)`` best assignments, best first.

    Ordering is by score descending, then ``alpha`` lexicographically
    ascending.
    """
    if L < 1:
        raise ValueError("L must be at least 1")
    D = _as_matrix(D)
    n = D.shape[0]
    alphas = np.empty((L, n), dtype=np.int64)
    scores = np.empty(L)
    cnt = _murty(D, int(L), alphas, scores)
    out = [Assignment(alphas[k].copy(), float(scores[k])) for k in range(cnt)]
    out.sort(key=lambda a: (-a.score, tuple(a.alpha)))
    return out


def _constrained_best(D, forced):
    n, m = D.shape
    excl = np.zeros((n, m), dtype=np.bool_)
    C = np.empty((n, m))
    allowed = np.empty((n, m), dtype=np.bool_)
    col = np.empty(n, dtype=np.int64)
    return _solve_sub(D, forced, excl, _sentinel(D), C, allowed, col), col


def best_assignment(D):
    """Highest-scoring assignment; among equal scores the lexicographically smallest."""
    D = _as_matrix(D)
    n, m = D.shape
    forced = np.full(n, -1, dtype=np.int64)
    best, col = _constrained_best(D, forced)
    if best == -np.inf:
        raise ValueError("no feasible assignment")
    tol = 1e-12 * max(1.0, abs(best))
    for r in range(n):
        for c in range(m):
            if not np.isfinite(D[r, c]) or c in forced[:r]:
                continue
            forced[r] = c
            s, _ = _constrained_best(D, forced)
            if s >= best - tol:
                break
        else:  # pragma: no cover - unreachable, the optimum itself qualifies
            raise AssertionError("lexicographic refinement failed")
    return Assignment(forced.copy(), float(D[np.arange(n), forced].sum()))


def decode_association(alpha, k_x, k_y):
    """Detection indicators and target-to-observation map implied by ``alpha``."""
    alpha = np.asarray(getattr(alpha, "alpha", alpha), dtype=np.int64)
    if alpha.shape != (k_x,):
        raise ValueError(f"alpha has shape {alpha.shape}, expected ({k_x},)")
    c_d = (alpha < k_y).astype(np.int8)
    a = alpha[c_d.astype(bool)]
    k_d = int(c_d.sum())
    return AssociationFragment(c_d=c_d, a=a, k_d=k_d, k_f=k_y - k_d)


def encode_association(c_d, a, k_y):
    """Inverse of :func:`decode_association`."""
    c_d = np.asarray(c_d).astype(bool)
    alpha = k_y + np.arange(c_d.size, dtype=np.int64)
    alpha[c_d] = np.asarray(a, dtype=np.int64)
    return alpha


def assignment_probs(assignments):
    """Softmax weights ``exp(score)`` normalised over an L-best list."""
    s = np.array([a.score for a in assignments])
    w = np.exp(s - s.max())
    return w / w.sum()

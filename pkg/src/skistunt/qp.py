"""Dense dual active-set QP (Goldfarb-Idnani) for the small MPC subproblems.

Solves ``min 0.5 x'Gx + a'x  s.t.  C x >= b`` with ``G`` positive definite.
The active-set factorisation is rebuilt with a fresh QR every iteration;
problems here have at most a few dozen variables so this stays cheap and
sidesteps the bookkeeping of incremental Givens updates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

_INF = np.inf


class QpInfeasible(RuntimeError):
    pass


@dataclass
class QpResult:
    x: np.ndarray
    objective: float
    active: list = field(default_factory=list)
    multipliers: np.ndarray = None
    iterations: int = 0
    softened: bool = False
    slack: np.ndarray = None


def _feas_tol(b):
    return 1e-10 * (1.0 + np.abs(b))


def _dual_active_set(G, a, C, b, max_iter):
    n = G.shape[0]
    L = linalg.cholesky(G, lower=True)
    J0 = linalg.solve_triangular(L, np.eye(n), lower=True).T  # J0 J0' = G^-1
    x = -J0 @ (J0.T @ a)
    m = C.shape[0]
    A: list[int] = []
    u = np.zeros(0)
    tol = _feas_tol(b)
    it = 0
    while True:
        s = C @ x - b
        s[A] = 0.0
        viol = np.where(s < -tol)[0]
        if viol.size == 0:
            mult = np.zeros(m)
            mult[A] = u
            return x, A, mult, it
        p = viol[np.argmin(s[viol])]
        n_p = C[p]
        u_plus = np.append(u, 0.0)
        while True:
            it += 1
            if it > max_iter:
                raise RuntimeError("QP iteration limit reached")
            q = len(A)
            if q:
                Q, R = np.linalg.qr(J0.T @ C[A].T, mode="complete")
                R = R[:q]
                J = J0 @ Q
            else:
                J, R = J0, np.zeros((0, 0))
            d = J.T @ n_p
            z = J[:, q:] @ d[q:]
            r = linalg.solve_triangular(R, d[:q]) if q else np.zeros(0)
            t1, l = _INF, -1
            for j in range(q):
                if r[j] > 0 and u_plus[j] / r[j] < t1:
                    t1, l = u_plus[j] / r[j], j
            zn = z @ n_p
            t2 = _INF if abs(zn) <= 1e-14 * max(1.0, n_p @ n_p) else -(n_p @ x - b[p]) / zn
            t = min(t1, t2)
            if t == _INF:
                raise QpInfeasible(f"constraint {p} cannot be satisfied")
            step = np.append(-r, 1.0)
            if t2 < _INF:
                x = x + t * z
            u_plus = u_plus + t * step
            if t == t2:
                A.append(int(p))
                u = u_plus
                break
            # partial step: drop the blocking constraint and retry with the same p
            del A[l]
            u_plus = np.delete(u_plus, l)


def solve_qp(G, a, C=None, b=None, soft_rows=None, soft_penalty: float = 1e4,
             max_iter: int = 500) -> QpResult:
    """Exact solution of the convex QP; falls back to L1-softened rows if infeasible.

    ``soft_rows`` marks which rows may be relaxed (default: all). Slack costs
    ``soft_penalty`` per unit plus a tiny quadratic term that keeps the
    augmented Hessian definite.
    """
    G = np.asarray(G, dtype=float)
    a = np.asarray(a, dtype=float)
    n = a.size
    if C is None or len(C) == 0:
        C = np.zeros((0, n))
        b = np.zeros(0)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    b = np.asarray(b, dtype=float)
    try:
        x, A, mult, it = _dual_active_set(G, a, C, b, max_iter)
        return QpResult(x, float(0.5 * x @ G @ x + a @ x), A, mult, it)
    except QpInfeasible:
        pass
    soft = np.ones(len(b), bool) if soft_rows is None else np.asarray(soft_rows, bool)
    idx = np.where(soft)[0]
    k = idx.size
    if k == 0:
        raise QpInfeasible("hard constraints are infeasible")
    Gs = np.zeros((n + k, n + k))
    Gs[:n, :n] = G
    Gs[n:, n:] = np.eye(k) * 1e-6 * max(1.0, np.trace(G) / n)
    a_s = np.concatenate([a, np.full(k, soft_penalty)])
    Cs = np.zeros((len(b) + k, n + k))
    Cs[:len(b), :n] = C
    Cs[idx, n + np.arange(k)] = 1.0
    Cs[len(b):, n:] = np.eye(k)
    bs = np.concatenate([b, np.zeros(k)])
    xs, A, mult, it = _dual_active_set(Gs, a_s, Cs, bs, max_iter)
    x = xs[:n]
    return QpResult(x, float(0.5 * x @ G @ x + a @ x), [i for i in A if i < len(b)],
                    mult[:len(b)], it, softened=bool(np.any(xs[n:] > 1e-9)), slack=xs[n:])

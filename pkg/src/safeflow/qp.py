"""Dense primal active-set solver for small strictly convex QPs.

    minimize   0.5 theta'H theta + c'theta
    subject to A theta <= b

The controller solves one of these at every vector-field evaluation, with
``n`` and ``q`` in the single digits, so the solver favours exact active-set
identification and low per-call overhead over asymptotic efficiency.
A feasible starting point comes from a phase-1 problem that minimises the
largest constraint violation; an infeasible program raises `Infeasible`.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

from ._validation import check_matrix, check_vector
from .exceptions import DimensionError, IllConditioned, Infeasible, MaxIterations

__all__ = ["QpProblem", "QpSolution", "solve_qp", "kkt_residual", "kkt_violations"]

_PIVOT_TOL = 1e-13
_PHASE1_REG = 1e-6
_EMPTY = np.zeros(0)
_EMPTY_INT = np.zeros(0, dtype=np.int64)


class QpProblem:
    """Data ``(H, c, A, b)`` of a strictly convex inequality-constrained QP."""

    __slots__ = ("H", "c", "A", "b")

    def __init__(self, H, c, A, b, validate=True):
        if validate:
            c = check_vector(c, name="c")
            n = c.shape[0]
            H = check_matrix(H, (n, n), "H")
            A = check_matrix(A, (None, n), "A") if np.size(A) else np.zeros((0, n))
            b = check_vector(b, A.shape[0], "b") if A.shape[0] else np.zeros(0)
            if not np.allclose(H, H.T, rtol=0.0, atol=1e-12 * (1.0 + np.abs(H).max())):
                raise ValueError("H must be symmetric")
            if np.linalg.eigvalsh(0.5 * (H + H.T))[0] < 1e-10:
                raise ValueError("H must be positive definite (min eigenvalue >= 1e-10)")
        self.H = H
        self.c = c
        self.A = A
        self.b = b

    @property
    def n(self):
        return self.c.shape[0]

    @property
    def q(self):
        return self.b.shape[0]

    def objective(self, theta):
        return 0.5 * theta @ self.H @ theta + self.c @ theta

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in self.__slots__}

    @classmethod
    def from_dict(cls, data):
        n = len(data["c"])
        A = np.asarray(data.get("A", []), dtype=float).reshape(-1, n)
        return cls(data["H"], data["c"], A, data.get("b", []))


@dataclass
class QpSolution:
    theta: np.ndarray
    multipliers: np.ndarray
    active_set: tuple
    kkt_residual: float
    iterations: int

    def to_dict(self):
        return {
            "theta": self.theta.tolist(),
            "multipliers": self.multipliers.tolist(),
            "active_set": list(self.active_set),
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
        }


def kkt_violations(problem, theta, multipliers):
    """Stationarity, primal, dual and complementarity violations (max-norms)."""
    H, c, A, b = problem.H, problem.c, problem.A, problem.b
    theta = np.asarray(theta, dtype=float)
    lam = np.asarray(multipliers, dtype=float)
    if theta.shape != (problem.n,) or lam.shape != (problem.q,):
        raise DimensionError(
            f"expected theta of length {problem.n} and {problem.q} multipliers, "
            f"got {theta.shape} and {lam.shape}"
        )
    stat = H @ theta + c + A.T @ lam
    slack = A @ theta - b
    return {
        "stationarity": float(np.abs(stat).max()) if stat.size else 0.0,
        "primal": float(max(slack.max(), 0.0)) if slack.size else 0.0,
        "dual": float(max(-lam.min(), 0.0)) if lam.size else 0.0,
        "complementarity": float(np.abs(lam * slack).max()) if lam.size else 0.0,
    }


def kkt_residual(problem, solution):
    """Largest KKT violation of ``solution``, recomputed from scratch."""
    return max(kkt_violations(problem, solution.theta, solution.multipliers).values())


@njit(cache=True)
def _lu_solve(K, rhs):
    """Gaussian elimination with partial pivoting; returns ``(x, ok)``."""
    m = K.shape[0]
    M = K.copy()
    x = rhs.copy()
    scale = 0.0
    for i in range(m):
        for j in range(m):
            if abs(M[i, j]) > scale:
                scale = abs(M[i, j])
    if scale == 0.0:
        return x, m == 0
    for col in range(m):
        piv = col
        best = abs(M[col, col])
        for r in range(col + 1, m):
            if abs(M[r, col]) > best:
                best = abs(M[r, col])
                piv = r
        if best <= _PIVOT_TOL * scale:
            return x, False
        if piv != col:
            for j in range(m):
                tmp = M[col, j]
                M[col, j] = M[piv, j]
                M[piv, j] = tmp
            tmp = x[col]
            x[col] = x[piv]
            x[piv] = tmp
        for r in range(col + 1, m):
            f = M[r, col] / M[col, col]
            if f != 0.0:
                for j in range(col, m):
                    M[r, j] -= f * M[col, j]
                x[r] -= f * x[col]
    for col in range(m - 1, -1, -1):
        s = x[col]
        for j in range(col + 1, m):
            s -= M[col, j] * x[j]
        x[col] = s / M[col, col]
    return x, True


@njit(cache=True)
def _kkt_solve(H, g, A, work, nw, bw_rhs, rhs_w):
    """Solve ``[H Aw'; Aw 0][p; mu] = [-g; rhs_w]`` for the working rows."""
    n = H.shape[0]
    m = n + nw
    K = np.zeros((m, m))
    rhs = np.zeros(m)
    for i in range(n):
        rhs[i] = -g[i]
        for j in range(n):
            K[i, j] = H[i, j]
    for k in range(nw):
        r = work[k]
        for j in range(n):
            K[j, n + k] = A[r, j]
            K[n + k, j] = A[r, j]
        if bw_rhs:
            rhs[n + k] = rhs_w[k]
    sol, ok = _lu_solve(K, rhs)
    return sol[:n].copy(), sol[n:].copy(), ok


@njit(cache=True)
def _independent(A, cand, ncand):
    """Greedy independent subset (Gram-Schmidt) of the candidate rows."""
    q, n = A.shape
    basis = np.zeros((n, n))
    chosen = np.zeros(q, dtype=np.int64)
    nb = 0
    for k in range(ncand):
        i = cand[k]
        nrm = 0.0
        for j in range(n):
            nrm += A[i, j] * A[i, j]
        nrm = np.sqrt(nrm)
        if nrm == 0.0:
            continue
        res = A[i].copy()
        for t in range(nb):
            d = 0.0
            for j in range(n):
                d += basis[t, j] * A[i, j]
            for j in range(n):
                res[j] -= d * basis[t, j]
        rn = np.sqrt(np.sum(res * res))
        if rn <= 1e-10 * nrm:
            continue
        basis[nb] = res / rn
        chosen[nb] = i
        nb += 1
        if nb == n:
            break
    return chosen, nb


@njit(cache=True)
def _active_set_loop(H, c, A, b, theta, work, nw, tol, max_iter):
    """Primal active-set iterations from a feasible ``theta``.

    ``work[:nw]`` holds the working rows. Returns
    ``(theta, work, nw, mu, iterations, status)`` with status 0 on success,
    2 on the iteration cap and 3 on a singular working-set system.
    """
    q, n = A.shape
    in_w = np.zeros(q, dtype=np.bool_)
    for k in range(nw):
        in_w[work[k]] = True
    row_scale = np.zeros(q)
    for i in range(q):
        for j in range(n):
            row_scale[i] += abs(A[i, j])
    dummy = np.zeros(0)
    mu = np.zeros(nw)
    for it in range(1, max_iter + 1):
        g = H @ theta + c
        p, mu, ok = _kkt_solve(H, g, A, work, nw, False, dummy)
        if not ok:
            return theta, work, nw, mu, it, 3
        pmax = 0.0
        tmax = 0.0
        for j in range(n):
            pmax = max(pmax, abs(p[j]))
            tmax = max(tmax, abs(theta[j]))
        if pmax <= 1e-12 * (1.0 + tmax):
            if nw == 0:
                return theta, work, nw, mu, it, 0
            worst = 0
            for k in range(1, nw):
                # most negative multiplier; ties go to the lowest row index
                if mu[k] < mu[worst] or (mu[k] == mu[worst] and work[k] < work[worst]):
                    worst = k
            if mu[worst] >= -tol:
                return theta, work, nw, mu, it, 0
            in_w[work[worst]] = False
            for k in range(worst, nw - 1):
                work[k] = work[k + 1]
            nw -= 1
            continue
        alpha = 1.0
        blocking = -1
        pivot = _PIVOT_TOL * pmax
        for i in range(q):
            if in_w[i]:
                continue
            ap = 0.0
            at = 0.0
            for j in range(n):
                ap += A[i, j] * p[j]
                at += A[i, j] * theta[j]
            if ap <= pivot * row_scale[i]:
                continue
            ratio = max(b[i] - at, 0.0) / ap
            if ratio < alpha:
                alpha = ratio
                blocking = i
        theta = theta + alpha * p
        if blocking >= 0:
            work[nw] = blocking
            nw += 1
            in_w[blocking] = True
    return theta, work, nw, mu, max_iter, 2


@njit(cache=True)
def _solve_core(H, c, A, b, x0, use_x0, hint, nhint, tol, max_iter):
    """Full solve. Status: 0 ok, 1 infeasible, 2 iteration cap, 3 singular."""
    q, n = A.shape
    iterations = 0
    theta = np.zeros(n)
    work = np.zeros(max(q, 1), dtype=np.int64)
    nw = 0
    have_start = False
    viol = 0.0

    if nhint > 0:
        chosen, nb = _independent(A, hint, nhint)
        rhs_w = np.zeros(nb)
        for k in range(nb):
            rhs_w[k] = b[chosen[k]]
        cand, _, ok = _kkt_solve(H, c, A, chosen, nb, True, rhs_w)
        iterations += 1
        if ok:
            feas = True
            for i in range(q):
                if A[i] @ cand - b[i] > tol:
                    feas = False
                    break
            if feas:
                theta = cand
                for k in range(nb):
                    work[k] = chosen[k]
                nw = nb
                have_start = True

    if not have_start:
        dummy = np.zeros(0)
        empty = np.zeros(0, dtype=np.int64)
        if use_x0:
            start = x0.copy()
        else:
            start, _, ok = _kkt_solve(H, c, A, empty, 0, False, dummy)
            if not ok:
                return theta, np.zeros(q), work, 0, iterations, 3, 0.0
        feas = True
        for k in range(2):
            feas = True
            for i in range(q):
                if A[i] @ start - b[i] > tol:
                    feas = False
                    break
            if feas or use_x0:
                break
            start = np.zeros(n)
        if not feas:
            # phase 1: min t + reg/2 |(theta, t)|^2  s.t.  A theta - t <= b, t >= 0
            viol = -np.inf
            for i in range(q):
                viol = max(viol, A[i] @ start - b[i])
            Aa = np.zeros((q + 1, n + 1))
            Aa[:q, :n] = A
            Aa[:q, n] = -1.0
            Aa[q, n] = -1.0
            ba = np.zeros(q + 1)
            ba[:q] = b
            Ha = _PHASE1_REG * np.eye(n + 1)
            ca = np.zeros(n + 1)
            ca[n] = 1.0
            za = np.zeros(n + 1)
            za[:n] = start
            za[n] = viol
            wa = np.zeros(q + 1, dtype=np.int64)
            za, wa, nwa, _, it1, st = _active_set_loop(Ha, ca, Aa, ba, za, wa, 0, tol, max_iter)
            iterations += it1
            if st != 0:
                return theta, np.zeros(q), work, 0, iterations, st, 0.0
            bscale = 1.0
            for i in range(q):
                bscale = max(bscale, 1.0 + abs(b[i]))
            if za[n] > tol * bscale:
                return theta, np.zeros(q), work, 0, iterations, 1, za[n]
            start = za[:n].copy()
        theta = start
        cand = np.zeros(q, dtype=np.int64)
        nc = 0
        for i in range(q):
            if b[i] - A[i] @ theta <= tol * (1.0 + abs(b[i])):
                cand[nc] = i
                nc += 1
        chosen, nb = _independent(A, cand, nc)
        for k in range(nb):
            work[k] = chosen[k]
        nw = nb

    theta, work, nw, mu, it2, st = _active_set_loop(H, c, A, b, theta, work, nw, tol, max_iter)
    iterations += it2
    lam = np.zeros(q)
    for k in range(nw):
        lam[work[k]] = mu[k]
    active = np.sort(work[:nw])
    res = _residual(H, c, A, b, theta, lam)
    if st == 0:
        cmax = 0.0
        for j in range(n):
            cmax = max(cmax, abs(c[j]))
        if res > tol * (1.0 + cmax):
            st = 4
    return theta, lam, active, nw, iterations, st, res


@njit(cache=True)
def _residual(H, c, A, b, theta, lam):
    q, n = A.shape
    res = 0.0
    stat = H @ theta + c
    for i in range(q):
        slack = A[i] @ theta - b[i]
        res = max(res, slack, -lam[i], abs(lam[i] * slack))
        for j in range(n):
            stat[j] += A[i, j] * lam[i]
    for j in range(n):
        res = max(res, abs(stat[j]))
    return res


def _solve_raw(problem, tol, max_iter, x0, hint):
    H, c, A, b = problem.H, problem.c, problem.A, problem.b
    use_x0 = x0 is not None
    theta, lam, active, nw, iterations, status, info = _solve_core(
        H, c, A, b, x0 if use_x0 else _EMPTY, use_x0, hint, hint.shape[0], tol, max_iter
    )
    if status:
        if status == 1:
            raise Infeasible(f"QP constraints infeasible (min worst violation {info:.3e})")
        if status == 2:
            raise MaxIterations(f"active-set method did not converge in {max_iter} iterations")
        if status == 4:
            raise IllConditioned(f"KKT residual {info:.3e} exceeds tolerance after convergence")
        raise IllConditioned("working-set KKT system is singular")
    return theta, lam, active, iterations, info


def solve_qp(problem, tol=1e-9, max_iter=200, x0=None, active_set_hint=None):
    """Solve the QP; return a `QpSolution` with full-length multipliers.

    ``x0`` is an optional starting point (used if feasible, otherwise it
    seeds phase 1); ``active_set_hint`` is an optional guess of the active
    rows, e.g. from a previous nearby solve. Neither changes the answer,
    only how quickly it is reached.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if x0 is not None:
        x0 = check_vector(x0, problem.n, "x0")
    if active_set_hint is not None and len(active_set_hint):
        hint = np.unique(np.asarray(active_set_hint, dtype=np.int64))
        if hint.min() < 0 or hint.max() >= problem.q:
            raise DimensionError("active_set_hint refers to rows outside the problem")
    else:
        hint = _EMPTY_INT
    theta, lam, active, iterations, residual = _solve_raw(
        problem, float(tol), int(max_iter), x0, hint
    )
    return QpSolution(theta, lam, tuple(active.tolist()), residual, int(iterations))

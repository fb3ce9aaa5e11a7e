"""Independent reference computations used by the test-suite.

Nothing here imports the solver or controller internals; each oracle
recomputes its answer from first principles.
"""

import itertools

import numpy as np


def enumerate_qp(H, c, A, b, tol=1e-9):
    """Solve ``min 0.5 t'Ht + c't  s.t.  At <= b`` by trying every active set.

    For each subset S of rows with independent gradients, solve the
    equality-constrained KKT system and keep the candidate that is primal
    and dual feasible. Strict convexity makes that candidate unique.
    Returns ``(theta, multipliers)`` or ``None`` if nothing qualifies.
    """
    n = H.shape[0]
    q = A.shape[0]
    scale = 1.0 + np.abs(b).max(initial=0.0)
    best = None
    for k in range(0, min(n, q) + 1):
        for S in itertools.combinations(range(q), k):
            S = list(S)
            As = A[S]
            if k and np.linalg.matrix_rank(As) < k:
                continue
            K = np.block([[H, As.T], [As, np.zeros((k, k))]])
            rhs = np.concatenate([-c, b[S]])
            sol = np.linalg.solve(K, rhs)
            theta, mu = sol[:n], sol[n:]
            if q and np.any(A @ theta - b > tol * scale):
                continue
            if k and np.any(mu < -tol):
                continue
            lam = np.zeros(q)
            lam[S] = mu
            obj = 0.5 * theta @ H @ theta + c @ theta
            if best is None or obj < best[2]:
                best = (theta, lam, obj)
    if best is None:
        return None
    return best[0], best[1]


def random_feasible_qp(rng, n_max=5, q_max=8):
    """Random SPD QP whose constraints hold strictly at a random point."""
    n = int(rng.integers(1, n_max + 1))
    q = int(rng.integers(0, q_max + 1))
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.5 * np.eye(n)
    c = rng.normal(size=n) * 3.0
    A = rng.normal(size=(q, n))
    x_feas = rng.normal(size=n)
    b = A @ x_feas + rng.uniform(0.05, 1.0, size=q)
    return H, c, A, b


def halfspace_tangent_projection(a, v):
    """Project ``v`` onto the tangent cone ``{d : a'd <= 0}`` of a halfspace."""
    a = np.asarray(a, dtype=float)
    v = np.asarray(v, dtype=float)
    if a @ v <= 0:
        return v
    return v - (a @ v) / (a @ a) * a

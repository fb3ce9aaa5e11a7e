"""Numerical checks of the closed-loop theory.

This module computes the optimum of the steady-state problem with a
solver that shares no code with the controller, checks the KKT conditions,
and linearises the steady-state controller field at the optimum. It also
solves the Lyapunov equation for that Jacobian, estimates Lipschitz and
quadratic-remainder constants by sampling, and turns all of it into the
local exponential-stability certificate. Sampled constants are
over-estimates with a fixed 1.5x safety factor; reports keep the raw and
inflated values apart.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from ._validation import check_random_state, check_vector
from .controller import ControllerConfig, solve_controller_qp, steady_flow
from .exceptions import (
    EtaOutOfRange,
    InvalidS,
    LicqViolated,
    MissingErrorChannel,
    NoConvergence,
    NotNegativeDefinite,
    SingularLyapunovSystem,
)
from .problem import fd_jacobian

__all__ = [
    "TargetSolution",
    "KktReport",
    "StabilityConstants",
    "StabilityReport",
    "LipschitzEstimate",
    "solve_target_problem",
    "check_kkt",
    "multipliers_from_flow",
    "jacobian_E",
    "lyapunov_P",
    "lyapunov_sandwich",
    "estimate_lipschitz",
    "estimate_quadratic_remainder",
    "s_min",
    "convergence_certificate",
    "optimize_kappa",
    "verify_envelope",
    "lti_lyapunov_constants",
    "fit_inner_loop_constants",
    "equilibrium_samples",
    "CertifyOptions",
    "certify",
]

SAFETY = 1.5


# -- the steady-state problem seen as an NLP in u ---------------------------


def _reduced(spec, plant, w):
    """Objective, gradient, constraints and constraint Jacobian as functions of u."""

    def obj(u):
        return float(spec.phi(u)) + float(spec.psi(plant.h(u, w)))

    def grad(u):
        return spec.grad_phi(u) + plant.jac_h(u).T @ spec.grad_psi(plant.h(u, w))

    def cons(u):
        return np.concatenate([spec.ell_values(plant.h(u, w)), spec.gamma_values(u)])

    def cons_jac(u):
        return np.vstack(
            [spec.ell_jacobian(plant.h(u, w)) @ plant.jac_h(u), spec.gamma_jacobian(u)]
        )

    return obj, grad, cons, cons_jac


@dataclass
class KktReport:
    stationarity: float
    primal: float
    dual: float
    complementarity: float
    tol: float
    flow_norm: Optional[float] = None

    @property
    def residual(self):
        return max(self.stationarity, self.primal, self.dual, self.complementarity)

    @property
    def passed(self):
        return self.residual <= self.tol

    def to_dict(self):
        d = asdict(self)
        d.update(residual=self.residual, passed=self.passed)
        return d


def check_kkt(spec, plant, w, u, lam, tol=1e-6, cfg=None):
    """KKT conditions of the steady-state problem at ``(u, lam)``.

    ``lam`` stacks the ``p`` state-constraint and ``m`` input-constraint
    multipliers. The report also carries ``|F_beta(h(u, w), u)|`` so both
    sides of the KKT/equilibrium correspondence can be compared.
    """
    u = check_vector(u, spec.n_u, "u")
    lam = check_vector(lam, spec.p + spec.m, "lambda")
    w = check_vector(w, plant.n_w, "w")
    _, grad, cons, cons_jac = _reduced(spec, plant, w)
    c = cons(u)
    stat = grad(u) + cons_jac(u).T @ lam
    cfg = cfg or ControllerConfig()
    flow = steady_flow(spec, plant, u, w, cfg)
    return KktReport(
        stationarity=float(np.abs(stat).max()),
        primal=float(max(c.max(), 0.0)) if c.size else 0.0,
        dual=float(max(-lam.min(), 0.0)) if lam.size else 0.0,
        complementarity=float(np.abs(lam * c).max()) if c.size else 0.0,
        tol=float(tol),
        flow_norm=float(np.linalg.norm(flow)),
    )


def multipliers_from_flow(spec, plant, w, u, cfg=None):
    """Problem multipliers recovered from the controller QP at ``h(u, w)``.

    At an equilibrium the QP stationarity condition reads
    ``2 grad f + A' mu = 0``, so the problem multipliers are ``mu / 2``.
    """
    cfg = cfg or ControllerConfig()
    sol = solve_controller_qp(spec, plant.h(u, w), u, plant.jac_h(u), cfg)
    return 0.5 * sol.multipliers


@dataclass
class TargetSolution:
    u: np.ndarray
    lam: np.ndarray
    active: tuple
    kkt_residual: float
    licq: bool
    strict_complementarity: bool
    min_active_multiplier: float
    iterations: int
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "u": self.u.tolist(),
            "lambda": self.lam.tolist(),
            "active": list(self.active),
            "kkt_residual": self.kkt_residual,
            "licq": self.licq,
            "strict_complementarity": self.strict_complementarity,
            "min_active_multiplier": self.min_active_multiplier,
            "iterations": self.iterations,
            "notes": list(self.notes),
        }


def _kkt_newton(grad, cons, cons_jac, u, lam_a, active, tol, max_iter=30):
    """Newton's method on ``grad + Jc_A' lam_A = 0, c_A(u) = 0``."""
    n = u.shape[0]
    k = len(active)

    def residual(v):
        uu, ll = v[:n], v[n:]
        r = grad(uu) + (cons_jac(uu)[active].T @ ll if k else 0.0)
        return np.concatenate([r, cons(uu)[active]]) if k else r

    v = np.concatenate([u, lam_a])
    for it in range(max_iter):
        r = residual(v)
        if np.abs(r).max() <= 1e-3 * tol:
            return v[:n], v[n:], it
        J = fd_jacobian(residual, v, rel_step=1e-7)
        try:
            dv = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            dv = np.linalg.lstsq(J, -r, rcond=None)[0]
        v = v + dv
    return v[:n], v[n:], max_iter


def solve_target_problem(spec, plant, w, u_init, tol=1e-8, max_iter=500):
    """Local solution ``(u*, lambda*)`` of the steady-state problem.

    A sequential quadratic programming run (scipy SLSQP) locates the
    optimum, then Newton's method on the KKT equations of the identified
    active set polishes it to ``tol``. LICQ is checked by the rank of the
    active constraint gradients (a failure raises `LicqViolated`); strict
    complementarity is reported in ``strict_complementarity`` but does not
    raise.
    """
    w = check_vector(w, plant.n_w, "w")
    u0 = check_vector(u_init, spec.n_u, "u_init")
    obj, grad, cons, cons_jac = _reduced(spec, plant, w)
    q = spec.p + spec.m
    constraints = []
    if q:
        constraints = [{"type": "ineq", "fun": lambda u: -cons(u), "jac": lambda u: -cons_jac(u)}]
    res = minimize(
        obj, u0, jac=grad, method="SLSQP", constraints=constraints,
        options={"maxiter": max_iter, "ftol": 1e-14},
    )
    u = res.x
    notes = []
    if not res.success:
        notes.append(f"SLSQP: {res.message}")

    for _ in range(q + 1):
        c = cons(u)
        active = [i for i in range(q) if c[i] >= -1e-6]
        Jc = cons_jac(u)
        if active:
            lam_a = np.linalg.lstsq(Jc[active].T, -grad(u), rcond=None)[0]
        else:
            lam_a = np.zeros(0)
        u_new, lam_a, its = _kkt_newton(grad, cons, cons_jac, u, lam_a, active, tol)
        if active and lam_a.min() < -tol:
            # a wrongly identified active row: release it and retry
            drop = active[int(np.argmin(lam_a))]
            notes.append(f"released row {drop} with negative multiplier {lam_a.min():.3e}")
            u = u_new + 1e-4 * np.linalg.norm(cons_jac(u_new)[drop]) ** -1 * -cons_jac(u_new)[drop]
            continue
        u = u_new
        break

    lam = np.zeros(q)
    lam[active] = lam_a
    kkt = check_kkt(spec, plant, w, u, lam, tol)
    if kkt.residual > tol:
        raise NoConvergence(f"KKT residual {kkt.residual:.3e} above tolerance {tol:.1e}")
    Jc = cons_jac(u)
    licq = (not active) or np.linalg.matrix_rank(Jc[active], tol=1e-10) == len(active)
    if not licq:
        raise LicqViolated(f"active constraint gradients {active} are linearly dependent")
    min_mult = float(lam_a.min()) if active else math.inf
    strict = bool(min_mult > tol)
    if not strict:
        notes.append("strict complementarity fails at the computed optimum")
    return TargetSolution(
        u=u, lam=lam, active=tuple(active), kkt_residual=kkt.residual, licq=bool(licq),
        strict_complementarity=strict, min_active_multiplier=min_mult,
        iterations=int(res.nit) + its, notes=notes,
    )


# -- linearisation and Lyapunov matrix ---------------------------------------


@dataclass
class JacobianResult:
    E: np.ndarray
    eigenvalues: np.ndarray
    sym_eigenvalues: np.ndarray
    e1: float
    e2: float
    consistency: float
    symmetric: bool
    notes: list = field(default_factory=list)


def _fd_flow_jacobian(spec, plant, w, u, cfg, step):
    n = spec.n_u
    E = np.empty((n, n))
    for i in range(n):
        du = np.zeros(n)
        du[i] = step
        E[:, i] = (steady_flow(spec, plant, u + du, w, cfg) - steady_flow(spec, plant, u - du, w, cfg)) / (2 * step)
    return E


def jacobian_E(spec, plant, w, u_star, cfg=None, fd_step=1e-5, check_step=None, rtol=1e-3):
    """Jacobian of ``u -> F_beta(h(u, w), u)`` at ``u_star`` by central differences.

    The Jacobian is recomputed at ``check_step`` (default ``fd_step / 10``)
    and the relative disagreement is reported as ``consistency``; a value
    above ``rtol`` is noted, since it usually means a step straddles an
    active-set switch. ``e1`` and ``e2`` are the negated extreme
    eigenvalues of the symmetric part, which decides definiteness; the
    eigenvalues of ``E`` itself are reported alongside.
    """
    cfg = cfg or ControllerConfig()
    u_star = check_vector(u_star, spec.n_u, "u_star")
    w = check_vector(w, plant.n_w, "w")
    check_step = fd_step / 10.0 if check_step is None else check_step
    E = _fd_flow_jacobian(spec, plant, w, u_star, cfg, fd_step)
    E2 = _fd_flow_jacobian(spec, plant, w, u_star, cfg, check_step)
    consistency = float(np.linalg.norm(E - E2) / max(np.linalg.norm(E), 1e-300))
    sym = 0.5 * (E + E.T)
    sym_eigs = np.linalg.eigvalsh(sym)
    eigs = np.linalg.eigvals(E)
    notes = []
    if consistency > rtol:
        notes.append(f"finite-difference steps disagree by {consistency:.2e} (relative)")
    symmetric = bool(np.linalg.norm(E - E.T) <= 1e-6 * (1.0 + np.linalg.norm(E)))
    if not symmetric:
        gap = abs(float(eigs.real.max()) - float(sym_eigs[-1]))
        if gap > 1e-6 * (1.0 + abs(sym_eigs[-1])):
            notes.append(
                f"E is not symmetric; max Re eig(E) = {eigs.real.max():.6g} vs "
                f"max eig of symmetric part {sym_eigs[-1]:.6g}"
            )
    if sym_eigs[-1] >= 0:
        raise NotNegativeDefinite(
            f"symmetric part of E has eigenvalue {sym_eigs[-1]:.3e} >= 0"
        )
    return JacobianResult(
        E=E, eigenvalues=eigs, sym_eigenvalues=sym_eigs, e1=float(-sym_eigs[-1]),
        e2=float(-sym_eigs[0]), consistency=consistency, symmetric=symmetric, notes=notes,
    )


def lyapunov_P(E, kappa=1.0):
    """Solve ``P E + E' P = -kappa I`` through its Kronecker form."""
    E = np.asarray(E, dtype=float)
    n = E.shape[0]
    I = np.eye(n)
    # column-major vec: vec(PE) = (E' kron I) vec(P), vec(E'P) = (I kron E') vec(P)
    K = np.kron(E.T, I) + np.kron(I, E.T)
    rhs = -kappa * I.reshape(-1, order="F")
    try:
        vecP = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        raise SingularLyapunovSystem("E has eigenvalues summing to zero") from None
    P = vecP.reshape(n, n, order="F")
    P = 0.5 * (P + P.T)
    resid = float(np.abs(P @ E + E.T @ P + kappa * I).max())
    if not np.isfinite(resid) or resid > 1e-10 * max(1.0, kappa):
        raise SingularLyapunovSystem(f"Lyapunov residual {resid:.3e} too large")
    return P


def lyapunov_sandwich(P, e1, e2, kappa, n_vectors=100, seed=None):
    """Worst ratios of ``v'Pv`` against ``kappa/(2 e2)`` and ``kappa/(2 e1)``.

    Returns ``(lower_ok, upper_ok, min_ratio, max_ratio)`` where the ratios
    are ``v'Pv / |v|^2``.
    """
    rng = check_random_state(seed)
    V = rng.normal(size=(n_vectors, P.shape[0]))
    ratios = np.einsum("ij,jk,ik->i", V, P, V) / np.einsum("ij,ij->i", V, V)
    lo, hi = kappa / (2 * e2), kappa / (2 * e1)
    slack = 1e-12 * max(1.0, hi)
    return bool(ratios.min() >= lo - slack), bool(ratios.max() <= hi + slack), float(ratios.min()), float(ratios.max())


# -- sampled constants -------------------------------------------------------


@dataclass
class LipschitzEstimate:
    raw: float
    value: float
    pair: tuple
    n_samples: int

    def to_dict(self):
        return {
            "raw": self.raw,
            "inflated": self.value,
            "pair": [np.asarray(p).tolist() for p in self.pair],
            "n_samples": self.n_samples,
        }


def estimate_lipschitz(fun, box, n_samples=200, seed=None, safety=SAFETY, neighbor_scale=1e-3):
    """Sampled Lipschitz constant of ``fun`` over the box ``(lower, upper)``.

    Takes the largest difference quotient over all pairs of ``n_samples``
    uniform points plus, for each point, a close neighbour (offset of
    relative size ``neighbor_scale``) to catch local slopes. The samples for
    ``n`` points are a prefix of those for ``2n``, so the raw estimate
    never decreases with more samples. Returns raw and ``safety``-inflated
    values with the pair attaining the maximum.
    """
    if n_samples < 2:
        raise ValueError("need n_samples >= 2")
    lower, upper = (np.asarray(v, dtype=float) for v in box)
    rng = check_random_state(seed)
    draws = rng.uniform(size=(n_samples, 2, lower.shape[0]))
    width = upper - lower
    pts = lower + draws[:, 0] * width
    nbrs = np.clip(pts + (draws[:, 1] - 0.5) * 2.0 * neighbor_scale * width, lower, upper)
    allp = np.vstack([pts, nbrs])
    vals = np.array([np.atleast_1d(fun(p)) for p in allp])
    best, pair = 0.0, (allp[0], allp[0])
    n = n_samples
    for i in range(n):
        # all anchor pairs (i, j>i) plus the neighbour pair (i, n+i)
        js = np.concatenate([np.arange(i + 1, n), [n + i]])
        dx = np.linalg.norm(allp[js] - allp[i], axis=1)
        dv = np.linalg.norm(vals[js] - vals[i], axis=1)
        ok = dx > 0
        if not np.any(ok):
            continue
        q = dv[ok] / dx[ok]
        k = int(np.argmax(q))
        if q[k] > best:
            best = float(q[k])
            pair = (allp[i], allp[js[ok][k]])
    return LipschitzEstimate(raw=best, value=safety * best, pair=pair, n_samples=n_samples)


def _ball_samples(rng, center, radius, n):
    """Half uniform in the ball, half with log-uniform radii down to 1e-4 radius."""
    d = center.shape[0]
    dirs = rng.normal(size=(n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    half = n // 2
    r = np.empty(n)
    r[:half] = radius * rng.uniform(size=half) ** (1.0 / d)
    r[half:] = radius * 10.0 ** rng.uniform(-4.0, 0.0, size=n - half)
    return center + dirs * r[:, None]


def estimate_quadratic_remainder(spec, plant, w, u_star, E, delta_ball, n_samples=400, seed=None, cfg=None, safety=SAFETY):
    """Constant ``L`` with ``|F(u) - E(u - u*)| <= L |u - u*|^2`` on a ball.

    Returns ``(L_inflated, delta, L_raw)``.
    """
    cfg = cfg or ControllerConfig()
    u_star = check_vector(u_star, spec.n_u, "u_star")
    rng = check_random_state(seed)
    raw = 0.0
    f_star = steady_flow(spec, plant, u_star, w, cfg)
    for u in _ball_samples(rng, u_star, float(delta_ball), n_samples):
        du = u - u_star
        nrm2 = float(du @ du)
        if nrm2 == 0.0:
            continue
        g = steady_flow(spec, plant, u, w, cfg) - f_star - E @ du
        raw = max(raw, float(np.linalg.norm(g)) / nrm2)
    return safety * raw, float(delta_ball), raw


# -- plant Lyapunov constants ------------------------------------------------


def lti_lyapunov_constants(plant):
    """Constants ``d1..d5`` from ``W = e'Se`` with ``S A + A'S = -I``."""
    from scipy.linalg import solve_continuous_lyapunov

    A = plant.A
    S = solve_continuous_lyapunov(A.T, -np.eye(A.shape[0]))
    S = 0.5 * (S + S.T)
    ev = np.linalg.eigvalsh(S)
    l_hu = float(np.linalg.norm(plant.jac_h(np.zeros(plant.n_u)), 2))
    d4 = 2.0 * float(ev[-1])
    return {"d1": float(ev[0]), "d2": float(ev[-1]), "d3": 1.0, "d4": d4, "d5": d4 * l_hu}


def fit_inner_loop_constants(plant, n_runs=20, radius=1.0, t_end=None, dt=1e-2, seed=0):
    """Estimate plant Lyapunov constants from sampled inner-loop transients.

    Runs the plant with a fixed input from random initial conditions and
    fits an exponential envelope ``|e(t)| <= K |e0| exp(-a t)`` on the
    output error. The constants are those of ``W = |e|^2 / (2a)`` widened
    by ``K``: ``d1 = 1/(2aK)``, ``d2 = K/(2a)``, ``d3 = 1``, ``d4 = K/a``,
    ``d5 = d4 * l_hu``. With ``K = 1`` this is exact for ``e' = -a e``.
    """
    rng = check_random_state(seed)
    u = np.zeros(plant.n_u)
    w = np.zeros(plant.n_w)
    target = plant.h(u, w)
    t_end = 20.0 / getattr(plant, "k", 1.0) if t_end is None else t_end
    n_steps = int(round(t_end / dt))
    logs = []
    for _ in range(n_runs):
        x = np.zeros(plant.n_x)
        direction = rng.normal(size=plant.n_y)
        x[: plant.n_y] = target + radius * rng.uniform(0.2, 1.0) * direction / np.linalg.norm(direction)
        if plant.n_x > plant.n_y:
            x[plant.n_y:] = rng.uniform(-np.pi, np.pi, plant.n_x - plant.n_y)
        e0 = np.linalg.norm(plant.output(x, w) - target)
        ts, es = [0.0], [1.0]
        for i in range(n_steps):
            k1 = plant.f(x, u, w)
            k2 = plant.f(x + 0.5 * dt * k1, u, w)
            k3 = plant.f(x + 0.5 * dt * k2, u, w)
            k4 = plant.f(x + dt * k3, u, w)
            x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            e = np.linalg.norm(plant.output(x, w) - target) / e0
            if e < 1e-10:
                break
            ts.append((i + 1) * dt)
            es.append(e)
        logs.append((np.array(ts), np.array(es)))
    # conservative rate: half the slowest late-time decay rate observed
    rates = []
    for ts, es in logs:
        tail = ts > 0.5 * ts[-1]
        if tail.sum() >= 2 and es[tail][-1] < es[tail][0]:
            rates.append(-np.polyfit(ts[tail], np.log(es[tail]), 1)[0])
    a = 0.5 * float(min(rates)) if rates else 0.5
    K = max(1.0, max(float((es * np.exp(a * ts)).max()) for ts, es in logs))
    l_hu = float(np.linalg.norm(plant.jac_h(u), 2))
    d4 = K / a
    return {
        "d1": 1.0 / (2.0 * a * K),
        "d2": K / (2.0 * a),
        "d3": 1.0,
        "d4": d4,
        "d5": d4 * l_hu,
        "K": K,
        "a": a,
    }


# -- certificate -------------------------------------------------------------


@dataclass
class StabilityConstants:
    d1: float
    d2: float
    d3: float
    d4: float
    d5: float
    l_Fx: float
    l_Fu: float
    l_hu: float
    e1: float
    e2: float
    L: float
    delta: float
    kappa: float = 1.0
    s: float = 1.0
    l_hw: float = 0.0
    M_u: float = 0.0
    alpha_0: Optional[float] = None
    r0: Optional[float] = None
    diam_X_eq: float = 0.0
    dist_x0: float = 0.0

    def __post_init__(self):
        for name in ("d1", "d2", "d3", "d4", "d5", "l_Fx", "l_Fu", "e1", "e2", "L", "delta", "kappa"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.d1 > self.d2:
            raise ValueError("need d1 <= d2")
        if self.e1 > self.e2:
            raise ValueError("need e1 <= e2")
        if self.l_hu < 0:
            raise ValueError("l_hu must be >= 0")


def s_min(e1, L, delta):
    """Lower end of the admissible ``s`` range."""
    if delta >= e1 / L:
        return 0.0
    return 1.0 - delta * L / e1


@dataclass
class StabilityReport:
    constants: dict
    eta: float
    theta: float
    M: np.ndarray
    lambda_M: float
    m_positive_definite: bool
    leading_minors: tuple
    s_min: float
    eta_star_1: float
    eta_star_2: float
    alpha_0: Optional[float]
    alpha_0_bounds: dict
    eta_bound: float
    eta_in_range: bool
    r1: float
    r2: float
    r_bar: float
    decay_rate: float
    input_radius: float
    state_radius: Optional[float]
    consistent: bool
    d0: Optional[float] = None
    E: Optional[np.ndarray] = None
    eigenvalues: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = None
    notes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def certified(self):
        return self.eta_in_range and self.m_positive_definite

    def to_dict(self):
        d = asdict(self)
        d["M"] = self.M.tolist()
        for key in ("E", "P"):
            d[key] = None if getattr(self, key) is None else np.asarray(getattr(self, key)).tolist()
        if self.eigenvalues is not None:
            ev = np.asarray(self.eigenvalues)
            d["eigenvalues"] = {"real": ev.real.tolist(), "imag": ev.imag.tolist()}
        d["leading_minors"] = list(self.leading_minors)
        d["certified"] = self.certified
        return _jsonable(d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def convergence_certificate(c, eta, strict=False):
    """Evaluate the local exponential stability certificate at gain ``eta``.

    Pure formula evaluation. An ``eta`` outside the admissible range is
    reported (``eta_in_range=False``) unless ``strict``, in which case
    `EtaOutOfRange` is raised; an ``s`` outside ``(s_min, 1]`` raises
    `InvalidS`.
    """
    eta = float(eta)
    if not eta > 0:
        raise ValueError("eta must be > 0")
    smin = s_min(c.e1, c.L, c.delta)
    if not (smin < c.s <= 1.0):
        raise InvalidS(f"s = {c.s} outside ({smin}, 1]")
    g = c.d4 * c.l_hu + c.d5
    theta = c.kappa * c.l_Fx / (c.e1 * c.l_Fu * g + c.kappa * c.l_Fx)
    m11 = theta / eta * (c.d3 - c.d4 * c.l_hu * c.l_Fx * eta - c.d5 * c.l_Fx * eta)
    m12 = -0.5 * (theta * g * c.l_Fu + (1.0 - theta) * c.kappa * c.l_Fx / c.e1)
    m22 = (1.0 - theta) * c.kappa * c.s
    M = np.array([[m11, m12], [m12, m22]])
    lam_M = float(np.linalg.eigvalsh(M)[0])
    minors = (m11, m11 * m22 - m12 * m12)
    pd = bool(minors[0] > 0 and minors[1] > 0)

    eta1 = c.s * c.d3 * c.e1 / (c.l_Fx * g * (c.l_Fu + c.e1 * c.s))
    eta2 = c.d3 / (2.0 * g * c.l_Fx)

    notes = []
    state_radius = None
    bounds = {}
    d0 = None
    alpha_0 = c.alpha_0
    if c.r0 is not None and c.M_u > 0:
        state_radius = math.sqrt(c.d1 / c.d2) * c.r0 - c.diam_X_eq
        # the two published forms differ in one factor (d4 vs l_Fx); keep the smaller
        bounds = {
            "with_d4": c.d3 / (2.0 * g * c.l_Fu * c.M_u) * state_radius,
            "with_l_Fx": c.d3 / (2.0 * (c.l_Fx * c.l_hu + c.d5) * c.l_Fu * c.M_u) * state_radius,
        }
        binding = min(bounds, key=bounds.get)
        bounds["binding"] = binding
        limit = bounds[binding]
        if alpha_0 is None:
            alpha_0 = limit
        elif alpha_0 > limit:
            notes.append(f"alpha_0 = {alpha_0:.4g} exceeds its bound {limit:.4g} ({binding})")
        if state_radius <= 0:
            notes.append("r0 too small: sqrt(d1/d2) r0 <= diam(X_eq)")
        if c.dist_x0 > state_radius:
            notes.append("initial state farther from X_eq than the certified distance")
        d0 = max(c.dist_x0, 2.0 * g * c.l_Fu * c.M_u * alpha_0 / c.d3)

    eta_bound = min(eta1, eta2, alpha_0 if alpha_0 is not None else math.inf)
    in_range = eta < eta_bound
    if not in_range:
        msg = f"EtaOutOfRange: eta = {eta:.4g} >= min(eta*_1, eta*_2, alpha_0) = {eta_bound:.4g}"
        if strict:
            raise EtaOutOfRange(msg)
        notes.append(msg)

    r1 = max(eta / (theta * c.d1), 2.0 * c.e2 * eta / (c.kappa * (1.0 - theta)))
    r2 = min(eta / (theta * c.d2), 2.0 * c.e1 * eta / (c.kappa * (1.0 - theta)))
    r_bar = math.sqrt(r1 / r2) * (1.0 + c.l_hu**2 + c.l_hu)
    consistent = (not in_range) or pd
    if not consistent:
        notes.append("M not positive definite although eta is in range")
    return StabilityReport(
        constants=asdict(c), eta=eta, theta=theta, M=M, lambda_M=lam_M,
        m_positive_definite=pd, leading_minors=minors, s_min=smin,
        eta_star_1=eta1, eta_star_2=eta2, alpha_0=alpha_0, alpha_0_bounds=bounds,
        eta_bound=eta_bound, eta_in_range=bool(in_range), r1=r1, r2=r2, r_bar=r_bar,
        decay_rate=0.5 * lam_M * r2, input_radius=c.e1 / c.L * (1.0 - c.s),
        state_radius=state_radius, consistent=consistent, d0=d0, notes=notes,
    )


def optimize_kappa(c, eta, lo=1e-3, hi=1e3, iters=60):
    """Golden-section search of ``log(kappa)`` maximising ``lambda_M r2``."""
    from dataclasses import replace

    def score(logk):
        rep = convergence_certificate(replace(c, kappa=math.exp(logk)), eta)
        return rep.lambda_M * rep.r2

    a, b = math.log(lo), math.log(hi)
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = score(x1), score(x2)
    for _ in range(iters):
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = score(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = score(x1)
    return math.exp(0.5 * (a + b))


# -- envelope check ----------------------------------------------------------


@dataclass
class EnvelopeVerdict:
    passed: bool
    certified: bool
    t0: float
    index0: int
    n_checked: int
    certified_rate: float
    empirical_rate: Optional[float]
    worst_margin: float
    notes: list = field(default_factory=list)

    def to_dict(self):
        return _jsonable(asdict(self))


def verify_envelope(traj, report, t0=None, floor=1e-8, tail_fraction=0.5):
    """Check ``|z~(t)| <= r_bar |z~(t0)| exp(-rate (t - t0))`` at every logged sample.

    ``t0`` defaults to the first logged time at which the input lies in the
    certified ball ``|u - u*| <= input_radius``; the bound is stated for
    initial conditions in that ball, and the closed loop is time-invariant.
    Also fits ``log|z~|`` on the last ``tail_fraction`` of samples above
    ``floor`` and reports the empirical decay rate; samples below ``floor``
    sit at the plant model's resolution and carry no rate information.
    """
    if traj.error is None:
        raise MissingErrorChannel("trajectory was simulated without a reference u*")
    err = traj.error
    times = traj.times
    notes = []
    if t0 is None:
        u_star = np.asarray(traj.meta.get("u_star"), dtype=float)
        du = np.linalg.norm(traj.inputs - u_star, axis=1)
        inside = np.nonzero(du <= report.input_radius)[0]
        if inside.size == 0:
            notes.append("trajectory never enters the certified input ball")
            return EnvelopeVerdict(False, report.certified, math.nan, -1, 0,
                                   report.decay_rate, _tail_rate(times, err, floor, tail_fraction),
                                   math.nan, notes)
        i0 = int(inside[0])
    else:
        i0 = int(np.searchsorted(times, t0))
    t_start = float(times[i0])
    rate = report.decay_rate
    env = report.r_bar * err[i0] * np.exp(-rate * (times[i0:] - t_start))
    margin = np.log(np.maximum(err[i0:], 1e-300)) - np.log(np.maximum(env, 1e-300))
    # samples at exactly zero error satisfy the bound trivially
    zero = err[i0:] == 0.0
    margin[zero] = -np.inf
    passed = bool(np.all(margin <= 1e-12))
    if not report.certified:
        notes.append("constants do not certify this gain; envelope is not a stability proof")
    return EnvelopeVerdict(
        passed=passed, certified=report.certified, t0=t_start, index0=i0,
        n_checked=int(len(times) - i0), certified_rate=rate,
        empirical_rate=_tail_rate(times, err, floor, tail_fraction),
        worst_margin=float(margin.max()) if margin.size else -math.inf, notes=notes,
    )


def _tail_rate(times, err, floor, tail_fraction):
    keep = err > floor
    if keep.sum() < 3:
        return None
    t, e = times[keep], err[keep]
    tail = t >= t[0] + (1.0 - tail_fraction) * (t[-1] - t[0])
    if tail.sum() < 2:
        return None
    slope = np.polyfit(t[tail], np.log(e[tail]), 1)[0]
    return float(-slope)


# -- end-to-end pipeline -----------------------------------------------------


def _box_vertices(lower, upper):
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    n = lower.shape[0]
    corners = np.array(np.meshgrid(*[[0.0, 1.0]] * n, indexing="ij")).reshape(n, -1).T
    return lower + corners * (upper - lower)


def equilibrium_samples(spec, plant, w, n_grid=5, w_radius=0.0):
    """Grid sample of ``X_eq = h(U_c, W)`` including the images of all box vertices.

    ``U_c`` is taken as the box ``spec.u_bounds``; ``W`` is the box
    ``w +- w_radius``. For affine ``h`` the vertex images give the exact
    diameter.
    """
    if spec.u_bounds is None:
        raise ValueError("spec has no u_bounds; pass equilibrium samples explicitly")
    lo, hi = spec.u_bounds
    axes = [np.linspace(a, b, n_grid) for a, b in zip(lo, hi)]
    U = np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(lo), -1).T
    w = np.asarray(w, dtype=float)
    Ws = [w] if w_radius == 0 else list(_box_vertices(w - w_radius, w + w_radius))
    return np.array([plant.h(u, wi) for u in U for wi in Ws])


def _diameter(S):
    diff = S[:, None, :] - S[None, :, :]
    return float(np.sqrt((diff**2).sum(axis=2)).max())


@dataclass
class CertifyOptions:
    """Choices for `certify`; ``None`` entries fall back to documented defaults.

    ``d_constants`` overrides the plant Lyapunov constants (any subset of
    ``d1..d5``). ``region`` selects where the Lipschitz constants are
    sampled: ``"local"`` uses the certified input ball and a state box of
    the same size around the optimum, ``"global"`` uses the whole input box.
    """

    kappa: float = 1.0
    s: Optional[float] = None
    delta: float = 0.5
    n_samples: int = 200
    seed: int = 0
    d_constants: Optional[dict] = None
    r0: Optional[float] = None
    alpha_0: Optional[float] = None
    optimize_kappa: bool = False
    region: str = "local"
    x_radius: Optional[float] = None
    n_u_slices: int = 5

    def __post_init__(self):
        if self.region not in ("local", "global"):
            raise ValueError("region must be 'local' or 'global'")


def certify(spec, plant, w, cfg=None, options=None, u_init=None, x0=None):
    """Run the whole certificate pipeline and return a `StabilityReport`.

    Steps: oracle optimum, Jacobian ``E`` and Lyapunov matrix ``P``,
    remainder constant ``L`` on the ``delta`` ball, the default ``s``
    (midpoint of ``(s_min, 1]``), Lipschitz constants, plant constants,
    ``M_u``, ``diam(X_eq)``, ``r0`` and finally the formulas at ``cfg.eta``.
    """
    from dataclasses import replace

    cfg = cfg or ControllerConfig()
    opt = options or CertifyOptions()
    w = check_vector(w, plant.n_w, "w")
    u_init = np.zeros(spec.n_u) if u_init is None else u_init
    target = solve_target_problem(spec, plant, w, u_init)
    u_star = target.u
    jac = jacobian_E(spec, plant, w, u_star, cfg)
    L, delta, L_raw = estimate_quadratic_remainder(
        spec, plant, w, u_star, jac.E, opt.delta, n_samples=2 * opt.n_samples, seed=opt.seed, cfg=cfg
    )
    smin = s_min(jac.e1, L, delta)
    s = 0.5 * (smin + 1.0) if opt.s is None else float(opt.s)
    rho_u = jac.e1 / L * (1.0 - s)

    # Lipschitz constants
    if opt.region == "global":
        if spec.u_bounds is None:
            raise ValueError("region='global' needs spec.u_bounds")
        u_box = spec.u_bounds
    else:
        u_box = (u_star - rho_u, u_star + rho_u)
    l_Fu = estimate_lipschitz(
        lambda u: steady_flow(spec, plant, u, w, cfg), u_box, opt.n_samples, seed=opt.seed
    )
    l_hu = max(
        float(np.linalg.norm(plant.jac_h(u), 2)) for u in _box_vertices(*u_box)
    )
    y_star = plant.h(u_star, w)
    x_rad = (l_hu + 1.0) * rho_u if opt.x_radius is None else float(opt.x_radius)
    x_box = (y_star - x_rad, y_star + x_rad)
    rng = check_random_state(opt.seed)
    u_slices = [u_star] + list(u_box[0] + rng.uniform(size=(opt.n_u_slices - 1, spec.n_u)) * (u_box[1] - u_box[0]))
    l_Fx = None
    for k, u in enumerate(u_slices):
        est = estimate_lipschitz(
            lambda x, u=u: solve_controller_qp(spec, x, u, plant.jac_h(u), cfg).theta,
            x_box, opt.n_samples, seed=opt.seed + k,
        )
        if l_Fx is None or est.raw > l_Fx.raw:
            l_Fx = est
    J_w = fd_jacobian(lambda v: plant.h(np.zeros(spec.n_u), v), w)
    l_hw = float(np.linalg.norm(J_w, 2))

    # plant Lyapunov constants
    from .plants import LtiPlant

    if isinstance(plant, LtiPlant):
        d = lti_lyapunov_constants(plant)
        d_source = "lyapunov"
    else:
        d = fit_inner_loop_constants(plant, seed=opt.seed)
        d_source = "estimated"
    if opt.d_constants:
        d.update({k: float(v) for k, v in opt.d_constants.items()})
        d_source = "override"

    # equilibrium set and radii
    notes = list(target.notes) + list(jac.notes)
    if spec.u_bounds is not None:
        verts = _box_vertices(*spec.u_bounds)
        M_u = float(np.linalg.norm(verts - u_star, axis=1).max())
        X_eq = equilibrium_samples(spec, plant, w)
        diam = _diameter(np.array([plant.h(v, w) for v in verts]))
        dist_x0 = 0.0
        if x0 is not None:
            y0 = plant.output(np.asarray(x0, dtype=float), w)
            dist_x0 = float(np.linalg.norm(X_eq - y0, axis=1).min())
        r0 = 2.0 * math.sqrt(d["d2"] / d["d1"]) * diam + 1.0 if opt.r0 is None else float(opt.r0)
    else:
        M_u, diam, dist_x0, r0 = 0.0, 0.0, 0.0, opt.r0
        notes.append("no input box known: M_u, diam(X_eq) and alpha_0 not computed")

    consts = StabilityConstants(
        d1=d["d1"], d2=d["d2"], d3=d["d3"], d4=d["d4"], d5=d["d5"],
        l_Fx=l_Fx.value, l_Fu=l_Fu.value, l_hu=l_hu, e1=jac.e1, e2=jac.e2,
        L=L, delta=delta, kappa=opt.kappa, s=s, l_hw=l_hw, M_u=M_u,
        alpha_0=opt.alpha_0, r0=r0, diam_X_eq=diam, dist_x0=dist_x0,
    )
    if opt.optimize_kappa:
        consts = replace(consts, kappa=optimize_kappa(consts, cfg.eta))
    report = convergence_certificate(consts, cfg.eta)
    report.E = jac.E
    report.eigenvalues = jac.eigenvalues
    report.P = lyapunov_P(jac.E, consts.kappa)
    report.notes = notes + report.notes
    report.extra = {
        "u_star": u_star.tolist(),
        "y_star": y_star.tolist(),
        "target": target.to_dict(),
        "sym_eigenvalues": jac.sym_eigenvalues.tolist(),
        "fd_consistency": jac.consistency,
        "L_raw": L_raw,
        "l_Fu": l_Fu.to_dict(),
        "l_Fx": l_Fx.to_dict(),
        "d_constants": d,
        "d_source": d_source,
        "region": opt.region,
        "lipschitz_boxes": {
            "u": [np.asarray(b).tolist() for b in u_box],
            "x": [np.asarray(b).tolist() for b in x_box],
        },
    }
    return report

"""Target optimization problem: cost pieces, state and input constraints.

The problem solved at steady state is

    minimize   phi(u) + psi(x)          with x = h(u, w)
    subject to ell(x) <= 0,  gamma(u) <= 0

Every function carries an analytic first derivative. `OptimizationSpec`
checks those derivatives against central finite differences when it is
constructed, so a typo in a gradient is caught before any simulation runs.
Constraints are always oriented as ``<= 0`` and are never rescaled.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._validation import check_matrix, check_random_state, check_vector
from .exceptions import ConfigurationError, DimensionError

__all__ = [
    "OptimizationSpec",
    "FeasibilityReport",
    "eval_objective",
    "feasibility_report",
    "fd_gradient",
    "fd_jacobian",
    "check_derivatives",
    "quadratic_spec",
    "unicycle_spec",
    "lti_quadratic_spec",
    "SPEC_CATALOG",
    "make_spec",
]

FD_REL_TOL = 1e-5


def _empty_values(_):
    return np.zeros(0)


def fd_jacobian(fun, v, rel_step=1e-6):
    """Central-difference Jacobian of a vector map, step ``rel_step*(1+|v_i|)``."""
    v = np.asarray(v, dtype=float)
    f0 = np.atleast_1d(np.asarray(fun(v), dtype=float))
    J = np.empty((f0.shape[0], v.shape[0]))
    for i in range(v.shape[0]):
        h = rel_step * (1.0 + abs(v[i]))
        vp = v.copy()
        vm = v.copy()
        vp[i] += h
        vm[i] -= h
        fp = np.atleast_1d(np.asarray(fun(vp), dtype=float))
        fm = np.atleast_1d(np.asarray(fun(vm), dtype=float))
        J[:, i] = (fp - fm) / (vp[i] - vm[i])
    return J


def fd_gradient(fun, v, rel_step=1e-6):
    """Central-difference gradient of a scalar function."""
    return fd_jacobian(lambda z: np.array([fun(z)]), v, rel_step)[0]


@dataclass(frozen=True)
class OptimizationSpec:
    """Cost and constraint functions of the steady-state problem.

    ``ell`` acts on the plant output the controller measures (for the
    unicycle that is the planar position, for LTI plants the full state);
    ``gamma`` acts on the input. ``p`` and ``m`` count their rows and may be
    zero, in which case the corresponding callables can be omitted.
    """

    n_u: int
    n_x: int
    phi: Callable
    grad_phi: Callable
    psi: Callable
    grad_psi: Callable
    p: int = 0
    m: int = 0
    ell: Optional[Callable] = None
    jac_ell: Optional[Callable] = None
    gamma: Optional[Callable] = None
    jac_gamma: Optional[Callable] = None
    name: str = "custom"
    sample_scale: float = 1.0
    # optional (lower, upper) box known to contain the input set
    u_bounds: Optional[tuple] = field(default=None, compare=False)
    validate: bool = field(default=True, compare=False)

    def __post_init__(self):
        if int(self.n_u) <= 0 or int(self.n_x) <= 0:
            raise ConfigurationError("n_u and n_x must be positive")
        if self.p < 0 or self.m < 0:
            raise ConfigurationError("p and m must be non-negative")
        if self.p > 0 and (self.ell is None or self.jac_ell is None):
            raise ConfigurationError("p > 0 requires ell and jac_ell")
        if self.m > 0 and (self.gamma is None or self.jac_gamma is None):
            raise ConfigurationError("m > 0 requires gamma and jac_gamma")
        if self.validate:
            bad = check_derivatives(self, n_points=5, seed=0)
            if bad:
                raise ConfigurationError(
                    f"spec {self.name!r}: analytic derivatives disagree with "
                    f"finite differences: {bad}"
                )

    # Evaluation helpers with dimension checks. Empty constraint blocks
    # return correctly shaped zero-size arrays.

    def ell_values(self, x):
        if self.p == 0:
            return np.zeros(0)
        return np.asarray(self.ell(x), dtype=float).reshape(self.p)

    def ell_jacobian(self, x):
        if self.p == 0:
            return np.zeros((0, self.n_x))
        return np.asarray(self.jac_ell(x), dtype=float).reshape(self.p, self.n_x)

    def gamma_values(self, u):
        if self.m == 0:
            return np.zeros(0)
        return np.asarray(self.gamma(u), dtype=float).reshape(self.m)

    def gamma_jacobian(self, u):
        if self.m == 0:
            return np.zeros((0, self.n_u))
        return np.asarray(self.jac_gamma(u), dtype=float).reshape(self.m, self.n_u)

    def objective_gradient_u(self, u, x, J_h):
        """Gradient of ``phi(u) + psi(h(u))`` given ``x = h(u)`` and ``J_h``."""
        return np.asarray(self.grad_phi(u), dtype=float) + J_h.T @ np.asarray(
            self.grad_psi(x), dtype=float
        )


def eval_objective(spec, u, x):
    """Return ``phi(u) + psi(x)``."""
    u = check_vector(u, spec.n_u, "u")
    x = check_vector(x, spec.n_x, "x")
    return float(spec.phi(u)) + float(spec.psi(x))


@dataclass(frozen=True)
class FeasibilityReport:
    ell: np.ndarray
    gamma: np.ndarray
    ell_ok: np.ndarray
    gamma_ok: np.ndarray
    tol: float

    @property
    def feasible(self):
        return bool(np.all(self.ell_ok) and np.all(self.gamma_ok))

    @property
    def max_violation(self):
        vals = np.concatenate([self.ell, self.gamma])
        return float(vals.max()) if vals.size else -np.inf


def feasibility_report(spec, u, x, tol=0.0):
    """Constraint values and per-row ``value <= tol`` flags."""
    if tol < 0:
        raise ValueError("tol must be >= 0")
    u = check_vector(u, spec.n_u, "u")
    x = check_vector(x, spec.n_x, "x")
    ell = spec.ell_values(x)
    gamma = spec.gamma_values(u)
    return FeasibilityReport(ell, gamma, ell <= tol, gamma <= tol, float(tol))


def _mismatch(supplied, approx):
    supplied = np.asarray(supplied, dtype=float).ravel()
    approx = np.asarray(approx, dtype=float).ravel()
    return float(np.linalg.norm(supplied - approx)), FD_REL_TOL * (
        1.0 + float(np.linalg.norm(approx))
    )


def check_derivatives(spec, n_points=100, seed=None, scale=None):
    """Compare analytic derivatives with finite differences at random points.

    Points are drawn uniformly from ``[-scale, scale]`` in every coordinate.
    Returns a list of ``(which, point_index, error, allowed)`` for every
    failure; an empty list means every check passes.
    """
    rng = check_random_state(seed)
    scale = spec.sample_scale if scale is None else scale
    failures = []
    for k in range(n_points):
        u = rng.uniform(-scale, scale, spec.n_u)
        x = rng.uniform(-scale, scale, spec.n_x)
        checks = [
            ("grad_phi", spec.grad_phi(u), fd_gradient(spec.phi, u)),
            ("grad_psi", spec.grad_psi(x), fd_gradient(spec.psi, x)),
        ]
        if spec.p:
            checks.append(("jac_ell", spec.ell_jacobian(x), fd_jacobian(spec.ell_values, x)))
        if spec.m:
            checks.append(
                ("jac_gamma", spec.gamma_jacobian(u), fd_jacobian(spec.gamma_values, u))
            )
        for which, supplied, approx in checks:
            err, allowed = _mismatch(supplied, approx)
            if not err <= allowed:
                failures.append((which, k, err, allowed))
    return failures


# -- built-in specs ---------------------------------------------------------


def _quadratic_rows(rows, dim, name):
    """Parse rows ``0.5 v'Pv + a'v + c <= 0`` into stacked arrays."""
    Ps, As, cs = [], [], []
    for i, row in enumerate(rows or []):
        P = row.get("P")
        P = np.zeros((dim, dim)) if P is None else check_matrix(P, (dim, dim), f"{name}[{i}].P")
        if not np.allclose(P, P.T):
            raise ConfigurationError(f"{name}[{i}].P must be symmetric")
        a = row.get("a")
        a = np.zeros(dim) if a is None else check_vector(a, dim, f"{name}[{i}].a")
        Ps.append(P)
        As.append(a)
        cs.append(float(row.get("c", 0.0)))
    if not Ps:
        return None
    return np.array(Ps), np.array(As), np.array(cs)


def _box_rows(lower, upper, dim):
    lower = check_vector(lower, dim, "lower")
    upper = check_vector(upper, dim, "upper")
    if np.any(lower >= upper):
        raise ConfigurationError("box bounds need lower < upper")
    rows = []
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        rows.append({"a": e, "c": -upper[i]})
        rows.append({"a": -e, "c": lower[i]})
    return rows


def quadratic_spec(
    n_u,
    n_x,
    Q=None,
    q=None,
    R=None,
    r=None,
    ell_rows=None,
    gamma_rows=None,
    u_box=None,
    name="quadratic",
    sample_scale=1.0,
    u_bounds=None,
):
    """Spec with quadratic costs and quadratic (or linear) constraint rows.

    Costs are ``0.5 u'Qu + q'u`` and ``0.5 x'Rx + r'x``. Each constraint
    row is a mapping with optional keys ``P`` (symmetric), ``a`` and ``c``
    describing ``0.5 v'Pv + a'v + c <= 0``. ``u_box=(lower, upper)``
    appends two rows per input coordinate after ``gamma_rows``.
    """
    Q = np.zeros((n_u, n_u)) if Q is None else check_matrix(Q, (n_u, n_u), "Q")
    q = np.zeros(n_u) if q is None else check_vector(q, n_u, "q")
    R = np.zeros((n_x, n_x)) if R is None else check_matrix(R, (n_x, n_x), "R")
    r = np.zeros(n_x) if r is None else check_vector(r, n_x, "r")
    Q = 0.5 * (Q + Q.T)
    R = 0.5 * (R + R.T)
    gamma_rows = list(gamma_rows or [])
    if u_box is not None:
        gamma_rows += _box_rows(u_box[0], u_box[1], n_u)
        if u_bounds is None:
            u_bounds = (np.asarray(u_box[0], dtype=float), np.asarray(u_box[1], dtype=float))
    ell = _quadratic_rows(ell_rows, n_x, "ell")
    gam = _quadratic_rows(gamma_rows, n_u, "gamma")

    def rows_value(data):
        P, A, c = data
        return lambda v: 0.5 * np.einsum("i,kij,j->k", v, P, v) + A @ v + c

    def rows_jac(data):
        P, A, _ = data
        return lambda v: P @ v + A

    kwargs = {}
    if ell is not None:
        kwargs.update(p=len(ell[2]), ell=rows_value(ell), jac_ell=rows_jac(ell))
    if gam is not None:
        kwargs.update(m=len(gam[2]), gamma=rows_value(gam), jac_gamma=rows_jac(gam))
    return OptimizationSpec(
        n_u=n_u,
        n_x=n_x,
        phi=lambda u: 0.5 * u @ Q @ u + q @ u,
        grad_phi=lambda u: Q @ u + q,
        psi=lambda x: 0.5 * x @ R @ x + r @ x,
        grad_psi=lambda x: R @ x + r,
        name=name,
        sample_scale=sample_scale,
        u_bounds=u_bounds,
        **kwargs,
    )


def unicycle_spec(target=(0.6, 0.8), radius_sq=0.9, input_weight=0.05, u_bound=10.0):
    """Position regulation problem for the unicycle.

    ``phi(u) = input_weight*|u|^2``, ``psi(x) = |x - target|^2`` on the
    measured planar position, one state constraint ``|x|^2 - radius_sq <= 0``
    and the box ``|u_i| <= u_bound`` as four rows ordered
    ``(u_a - U, -u_a - U, u_b - U, -u_b - U)``.
    """
    target = check_vector(target, 2, "target")
    w_in = float(input_weight)
    rsq = float(radius_sq)
    U = float(u_bound)
    box_A = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])

    return OptimizationSpec(
        n_u=2,
        n_x=2,
        phi=lambda u: w_in * float(u @ u),
        grad_phi=lambda u: 2.0 * w_in * u,
        psi=lambda x: float((x - target) @ (x - target)),
        grad_psi=lambda x: 2.0 * (x - target),
        p=1,
        ell=lambda x: np.array([x @ x - rsq]),
        jac_ell=lambda x: 2.0 * x.reshape(1, 2),
        m=4,
        gamma=lambda u: box_A @ u - U,
        jac_gamma=lambda u: box_A,
        name="unicycle_v",
        sample_scale=2.0,
        u_bounds=(-U * np.ones(2), U * np.ones(2)),
    )


# The LTI catalog problem lives on the three-state plant `plants.lti_default`.
# Its unconstrained optimum pushes the first state past 0.4, so the state
# constraint is active at the solution; the input box stays inactive.
LTI_Q = np.diag([1.0, 0.5])
LTI_X_REF = np.array([1.0, 0.5, 0.2])


def lti_quadratic_spec(x_max=0.4, u_bound=2.0):
    return quadratic_spec(
        n_u=2,
        n_x=3,
        Q=LTI_Q,
        R=np.eye(3),
        r=-LTI_X_REF,
        ell_rows=[{"a": [1.0, 0.0, 0.0], "c": -float(x_max)}],
        u_box=(-u_bound * np.ones(2), u_bound * np.ones(2)),
        name="lti_quadratic",
        sample_scale=2.0,
    )


SPEC_CATALOG = {
    "unicycle_v": unicycle_spec,
    "lti_quadratic": lti_quadratic_spec,
}


def make_spec(config):
    """Build a spec from a scenario ``spec`` block.

    Either ``{"catalog": name, ...keyword overrides}`` or an explicit
    quadratic description ``{"quadratic": {...}}`` with keys ``n_u``,
    ``n_x``, ``Q``, ``q``, ``R``, ``r``, ``ell``, ``gamma``, ``u_box``.
    """
    config = dict(config)
    if "catalog" in config:
        name = config.pop("catalog")
        if name not in SPEC_CATALOG:
            raise ConfigurationError(
                f"unknown spec {name!r}; known: {sorted(SPEC_CATALOG)}"
            )
        try:
            return SPEC_CATALOG[name](**config)
        except TypeError as exc:
            raise ConfigurationError(f"spec {name!r}: {exc}") from None
    if "quadratic" in config:
        q = dict(config["quadratic"])
        try:
            n_u, n_x = int(q.pop("n_u")), int(q.pop("n_x"))
        except KeyError as exc:
            raise ConfigurationError(f"quadratic spec needs {exc}") from None
        ell_rows = q.pop("ell", None)
        gamma_rows = q.pop("gamma", None)
        u_box = q.pop("u_box", None)
        name = q.pop("name", "quadratic")
        unknown = set(q) - {"Q", "q", "R", "r"}
        if unknown:
            raise ConfigurationError(f"unknown quadratic spec keys: {sorted(unknown)}")
        try:
            return quadratic_spec(
                n_u, n_x, ell_rows=ell_rows, gamma_rows=gamma_rows,
                u_box=u_box, name=name, **q,
            )
        except DimensionError as exc:
            raise ConfigurationError(str(exc)) from None
    raise ConfigurationError("spec block needs 'catalog' or 'quadratic'")

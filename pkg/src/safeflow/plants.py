"""Plant models with a known steady-state map.

A plant exposes its vector field ``f(x, u, w)``, the steady-state map
``h(u, w) = h_u(u) + h_w(w)`` and the sensitivity ``J_h(u) = dh_u/du``.
The controller never sees the raw state: it sees ``output(x, w)``, the
measurement the optimization problem is posed on. For LTI plants that is
the full state. For the unicycle it is the measured planar position
``(a, b) + w``; the heading is excluded because its equilibrium value
depends on the path taken.
"""

import math

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from ._validation import check_matrix, check_random_state, check_vector
from .exceptions import ConfigurationError, NotHurwitz
from .problem import fd_jacobian

__all__ = [
    "PlantModel",
    "LtiPlant",
    "UnicyclePlant",
    "dynamics",
    "steady_state",
    "sensitivity",
    "stability_certificate",
    "check_plant_contract",
    "lti_default",
    "make_plant",
    "wrap_angle",
]

HURWITZ_MARGIN = 1e-6


def wrap_angle(angle):
    """Wrap an angle into ``(-pi, pi]``."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


class PlantModel:
    """Interface shared by all plants.

    Subclasses set ``n_x``, ``n_u``, ``n_w`` and ``n_y`` (output dimension)
    and implement `f`, `h`, `jac_h` and `output`.
    """

    n_x: int
    n_u: int
    n_w: int
    n_y: int
    # box from which contract checks sample u and w
    u_sample_box: float = 1.0
    w_sample_box: float = 0.1

    def f(self, x, u, w):
        raise NotImplementedError

    def h(self, u, w):
        """Steady state of the measured output for constant ``(u, w)``."""
        raise NotImplementedError

    def jac_h(self, u):
        raise NotImplementedError

    def output(self, x, w):
        raise NotImplementedError

    def full_steady_state(self, u, w):
        """Steady state of the full plant state, used for residual checks."""
        return self.h(u, w)

    def to_config(self):
        raise NotImplementedError


class LtiPlant(PlantModel):
    """``x' = A x + B u + Ew w`` with Hurwitz ``A``.

    The steady state is ``-A^-1 (B u + Ew w)`` and ``J_h = -A^-1 B``.
    """

    def __init__(self, A, B, Ew=None, u_sample_box=1.0, w_sample_box=0.1):
        A = check_matrix(A, name="A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ConfigurationError(f"A must be square, got {A.shape}")
        B = check_matrix(B, (n, None), "B")
        Ew = np.eye(n) if Ew is None else check_matrix(Ew, (n, None), "Ew")
        abscissa = float(np.linalg.eigvals(A).real.max())
        if abscissa > -HURWITZ_MARGIN:
            raise NotHurwitz(f"A has spectral abscissa {abscissa:.3e}; plant must be exponentially stable")
        self.A, self.B, self.Ew = A, B, Ew
        self.n_x = self.n_y = n
        self.n_u = B.shape[1]
        self.n_w = Ew.shape[1]
        self._Ainv = np.linalg.inv(A)
        self._J = -self._Ainv @ B
        self._Hw = -self._Ainv @ Ew
        self.u_sample_box = float(u_sample_box)
        self.w_sample_box = float(w_sample_box)

    def f(self, x, u, w):
        return self.A @ x + self.B @ u + self.Ew @ w

    def h(self, u, w):
        return self._J @ u + self._Hw @ w

    def jac_h(self, u):
        return self._J

    def output(self, x, w):
        return x

    def to_config(self):
        return {
            "family": "lti",
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "Ew": self.Ew.tolist(),
        }


class UnicyclePlant(PlantModel):
    """Unicycle ``(a, b, heading)`` closed with a polar tracking law.

    With ``xi = |u - (a, b)|`` and ``tb`` the wrapped bearing error, the
    low-level inputs are ``v1 = k xi cos(tb)`` and
    ``v2 = k (cos(tb) + 1) sin(tb) + k tb``. The disturbance ``w`` is a
    constant offset on the measured position and does not affect the motion.
    """

    n_x = 3
    n_u = 2
    n_w = 2
    n_y = 2
    u_sample_box = 2.0
    w_sample_box = 0.2
    XI_EPS = 1e-9

    def __init__(self, k=2.0):
        k = float(k)
        if not k > 0:
            raise ConfigurationError("unicycle gain k must be > 0")
        self.k = k

    def f(self, x, u, w):
        a, b, heading = float(x[0]), float(x[1]), float(x[2])
        da = float(u[0]) - a
        db = float(u[1]) - b
        xi = math.hypot(da, db)
        if xi < self.XI_EPS:
            return np.zeros(3)
        tb = wrap_angle(math.atan2(db, da) - heading)
        k = self.k
        cb = math.cos(tb)
        v1 = k * xi * cb
        v2 = k * (cb + 1.0) * math.sin(tb) + k * tb
        return np.array([v1 * math.cos(heading), v1 * math.sin(heading), v2])

    _J = np.eye(2)
    _J.setflags(write=False)

    def h(self, u, w):
        return np.asarray(u, dtype=float) + w

    def jac_h(self, u):
        return self._J

    def output(self, x, w):
        return x[:2] + w

    def full_steady_state(self, u, w, heading=0.0):
        return np.array([u[0], u[1], heading], dtype=float)

    def to_config(self):
        return {"family": "unicycle", "k": self.k}


def dynamics(plant, x, u, w):
    """Vector field ``f(x, u, w)`` with dimension checks."""
    x = check_vector(x, plant.n_x, "x")
    u = check_vector(u, plant.n_u, "u")
    w = check_vector(w, plant.n_w, "w")
    return np.asarray(plant.f(x, u, w), dtype=float)


def steady_state(plant, u, w):
    """Measured steady state ``h(u, w)``."""
    u = check_vector(u, plant.n_u, "u")
    w = check_vector(w, plant.n_w, "w")
    return np.asarray(plant.h(u, w), dtype=float)


def sensitivity(plant, u):
    u = check_vector(u, plant.n_u, "u")
    return np.asarray(plant.jac_h(u), dtype=float)


def stability_certificate(plant, margin=0.0, n_checks=20, seed=0, t_end=None):
    """Constants ``(k, a)`` with ``|x(t)-h| <= k |x0-h| exp(-a t)``.

    For a well-conditioned eigenbasis ``V`` the bound uses the spectral
    abscissa and ``k = cond(V)``. Otherwise it falls back to the quadratic
    Lyapunov function ``S A + A'S = -I``, which gives
    ``k = sqrt(cond(S))`` and ``a = 1 / (2 lambda_max(S))``. The result is
    checked against ``n_checks`` exact step responses.
    """
    if not isinstance(plant, LtiPlant):
        raise TypeError("stability_certificate needs an LtiPlant")
    A = plant.A
    eigvals, V = np.linalg.eig(A)
    abscissa = float(eigvals.real.max())
    if abscissa >= 0:
        raise NotHurwitz("A is not Hurwitz")
    condV = float(np.linalg.cond(V))
    if np.isfinite(condV) and condV < 1e8:
        k, a = condV, -abscissa - margin
    else:
        S = solve_continuous_lyapunov(A.T, -np.eye(A.shape[0]))
        ev = np.linalg.eigvalsh(S)
        k, a = math.sqrt(ev[-1] / ev[0]), 1.0 / (2.0 * ev[-1]) - margin
    if k < 1.0 + 1e-12 and np.allclose(A, A.T):
        k = 1.0

    from scipy.linalg import expm

    rng = check_random_state(seed)
    t_end = 5.0 / max(a, 1e-12) if t_end is None else t_end
    times = np.linspace(0.0, t_end, 50)
    for _ in range(n_checks):
        e0 = rng.normal(size=A.shape[0])
        for t in times:
            et = expm(A * t) @ e0
            bound = k * np.linalg.norm(e0) * math.exp(-a * t)
            if np.linalg.norm(et) > bound * (1.0 + 1e-9) + 1e-14:
                raise NotHurwitz(f"certificate (k={k:.4g}, a={a:.4g}) violated at t={t:.4g}")
    return k, a


def check_plant_contract(plant, n_points=100, seed=0, tol=1e-8):
    """Re-check the steady-state, decomposition and sensitivity contracts.

    Returns a dict of the worst observed values; raises nothing.
    """
    rng = check_random_state(seed)
    worst_f = worst_dec = worst_jac = 0.0
    for _ in range(n_points):
        u = rng.uniform(-plant.u_sample_box, plant.u_sample_box, plant.n_u)
        w1 = rng.uniform(-plant.w_sample_box, plant.w_sample_box, plant.n_w)
        w2 = rng.uniform(-plant.w_sample_box, plant.w_sample_box, plant.n_w)
        u2 = rng.uniform(-plant.u_sample_box, plant.u_sample_box, plant.n_u)
        xs = plant.full_steady_state(u, w1)
        worst_f = max(worst_f, float(np.linalg.norm(plant.f(xs, u, w1))))
        # h(u, w1) - h(u, w2) must not depend on u
        d1 = plant.h(u, w1) - plant.h(u, w2)
        d2 = plant.h(u2, w1) - plant.h(u2, w2)
        worst_dec = max(worst_dec, float(np.linalg.norm(d1 - d2)))
        J = plant.jac_h(u)
        J_fd = fd_jacobian(lambda v: plant.h(v, np.zeros(plant.n_w)), u)
        rel = np.linalg.norm(J - J_fd) / (1.0 + np.linalg.norm(J_fd))
        worst_jac = max(worst_jac, float(rel))
    return {
        "steady_state_residual": worst_f,
        "decomposition_residual": worst_dec,
        "jacobian_rel_error": worst_jac,
        "ok": worst_f <= tol and worst_dec <= 1e-10 and worst_jac <= 1e-5,
    }


LTI_DEFAULT_A = [[-1.0, 0.5, 0.0], [0.0, -2.0, 0.3], [0.2, 0.0, -1.5]]
LTI_DEFAULT_B = [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]


def lti_default():
    """Three-state, two-input plant paired with the ``lti_quadratic`` spec."""
    return LtiPlant(LTI_DEFAULT_A, LTI_DEFAULT_B, np.eye(3))


def make_plant(config):
    """Build a plant from a scenario ``plant`` block."""
    config = dict(config)
    family = config.pop("family", None)
    try:
        if family == "unicycle":
            return UnicyclePlant(**config)
        if family == "lti":
            if config.pop("preset", None) == "default":
                return lti_default()
            return LtiPlant(**config)
    except TypeError as exc:
        raise ConfigurationError(f"plant {family!r}: {exc}") from None
    raise ConfigurationError(f"unknown plant family {family!r}; use 'lti' or 'unicycle'")

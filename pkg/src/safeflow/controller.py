"""Safe gradient flow feedback law.

At a measured output ``x`` and current input ``u`` the controller solves

    F(x, u) = argmin_theta |theta + grad_phi(u) + J_h' grad_psi(x)|^2
              s.t.  dell/dx(x) J_h theta <= -beta ell(x)
                    dgamma/du(u) theta   <= -beta gamma(u)

and integrates ``u' = eta F(x, u)``. Without constraints this is plain
gradient descent; with them, the rows act like control barrier conditions
that keep ``gamma(u) <= 0`` invariant and push ``ell`` back to feasibility.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_positive, check_vector
from .exceptions import DimensionError
from .qp import QpProblem, solve_qp

__all__ = [
    "ControllerConfig",
    "assemble_controller_qp",
    "solve_controller_qp",
    "safe_gradient_flow",
    "control_derivative",
    "projected_flow_reference",
    "steady_flow",
    "SafeGradientFlow",
]


@dataclass(frozen=True)
class ControllerConfig:
    beta: float = 10.0
    eta: float = 0.1
    qp_tol: float = 1e-9
    qp_max_iter: int = 200

    def __post_init__(self):
        check_positive(self.beta, "beta")
        # eta = 0 freezes the input; allowed so the plant can be run open-loop
        check_positive(self.eta, "eta", allow_zero=True)
        check_positive(self.qp_tol, "qp_tol")
        if int(self.qp_max_iter) < 1:
            raise ValueError("qp_max_iter must be >= 1")


_HESSIANS = {}


def _assemble(spec, x, u, J_h, beta):
    n_u, p, m = spec.n_u, spec.p, spec.m
    H = _HESSIANS.get(n_u)
    if H is None:
        H = _HESSIANS.setdefault(n_u, 2.0 * np.eye(n_u))
    c = 2.0 * (spec.grad_phi(u) + J_h.T @ spec.grad_psi(x))
    A = np.empty((p + m, n_u))
    b = np.empty(p + m)
    if p:
        A[:p] = spec.jac_ell(x) @ J_h
        b[:p] = spec.ell(x)
    if m:
        A[p:] = spec.jac_gamma(u)
        b[p:] = spec.gamma(u)
    b *= -beta
    return QpProblem(H, c, A, b, validate=False)


def assemble_controller_qp(spec, x, u, J_h, beta):
    """QP data with ``H = 2I``, ``c = 2(grad_phi + J_h' grad_psi)``.

    Rows are the ``p`` state-constraint rows followed by the ``m`` input rows.
    """
    x = check_vector(x, spec.n_x, "x")
    u = check_vector(u, spec.n_u, "u")
    J_h = check_matrix(J_h, (spec.n_x, spec.n_u), "J_h")
    check_positive(beta, "beta")
    return _assemble(spec, x, u, J_h, float(beta))


def solve_controller_qp(spec, x, u, J_h, cfg, active_set_hint=None):
    """Assemble and solve; return the full `QpSolution`."""
    qp = _assemble(spec, x, u, J_h, cfg.beta)
    return solve_qp(qp, cfg.qp_tol, cfg.qp_max_iter, active_set_hint=active_set_hint)


def safe_gradient_flow(spec, x, u, J_h, cfg):
    """Controller field ``F_beta(x, u)``.

    Raises `Infeasible` where the constraint rows admit no direction, i.e.
    where the feasibility assumption of the method breaks down.
    """
    x = check_vector(x, spec.n_x, "x")
    u = check_vector(u, spec.n_u, "u")
    J_h = check_matrix(J_h, (spec.n_x, spec.n_u), "J_h")
    return solve_controller_qp(spec, x, u, J_h, cfg).theta


def control_derivative(spec, x, u, J_h, cfg):
    """Input rate ``eta * F_beta(x, u)``."""
    if cfg.eta == 0:
        return np.zeros(spec.n_u)
    return cfg.eta * safe_gradient_flow(spec, x, u, J_h, cfg)


def steady_flow(spec, plant, u, w, cfg):
    """``F_beta(h(u, w), u)``: the field with the plant at steady state."""
    u = check_vector(u, spec.n_u, "u")
    w = check_vector(w, plant.n_w, "w")
    return solve_controller_qp(spec, plant.h(u, w), u, plant.jac_h(u), cfg).theta


def projected_flow_reference(spec, u, plant, w, beta_ladder, cfg=None):
    """``F_beta(h(u, w), u)`` for each beta in ``beta_ladder``.

    As beta grows this approaches the projection of the negative gradient
    onto the tangent cone of the feasible set at ``u``.
    """
    cfg = cfg or ControllerConfig()
    out = []
    for beta in beta_ladder:
        c = ControllerConfig(float(beta), cfg.eta, cfg.qp_tol, cfg.qp_max_iter)
        out.append(steady_flow(spec, plant, u, w, c))
    return np.array(out)


class SafeGradientFlow(BaseEstimator):
    """Estimator wrapper around the safe gradient flow controller.

    ``fit`` binds an optimization spec, a plant and a disturbance;
    ``transform`` maps rows ``z = (x, u)`` of full plant state and input to
    controller directions ``F_beta``; ``predict`` returns input rates
    ``eta * F_beta``. Hyper-parameters follow the usual ``get_params`` /
    ``set_params`` protocol, so sweeps can use ``clone`` and grids.
    """

    def __init__(self, beta=10.0, eta=0.1, qp_tol=1e-9, qp_max_iter=200):
        self.beta = beta
        self.eta = eta
        self.qp_tol = qp_tol
        self.qp_max_iter = qp_max_iter

    def fit(self, spec, plant, w=None):
        self.config_ = ControllerConfig(self.beta, self.eta, self.qp_tol, self.qp_max_iter)
        if plant.n_y != spec.n_x or plant.n_u != spec.n_u:
            raise DimensionError(
                f"plant output/input dims ({plant.n_y}, {plant.n_u}) do not match "
                f"spec ({spec.n_x}, {spec.n_u})"
            )
        self.spec_ = spec
        self.plant_ = plant
        self.w_ = check_vector(np.zeros(plant.n_w) if w is None else w, plant.n_w, "w")
        return self

    def _split(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        n_x = self.plant_.n_x
        if Z.shape[1] != n_x + self.plant_.n_u:
            raise ValueError(f"rows must have length {n_x + self.plant_.n_u}")
        return Z[:, :n_x], Z[:, n_x:]

    def transform(self, Z):
        check_is_fitted(self, "config_")
        X, U = self._split(Z)
        out = np.empty_like(U)
        for i, (x, u) in enumerate(zip(X, U)):
            y = self.plant_.output(x, self.w_)
            out[i] = solve_controller_qp(self.spec_, y, u, self.plant_.jac_h(u), self.config_).theta
        return out

    def predict(self, Z):
        return self.eta * self.transform(Z)

    def steady_transform(self, U):
        """``F_beta(h(u, w), u)`` for each row ``u`` of ``U``."""
        check_is_fitted(self, "config_")
        U = np.atleast_2d(np.asarray(U, dtype=float))
        return np.array([steady_flow(self.spec_, self.plant_, u, self.w_, self.config_) for u in U])

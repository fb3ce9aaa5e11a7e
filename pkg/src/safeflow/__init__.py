"""Safe gradient flow feedback optimization for plants with known steady-state maps."""

from .analysis import (
    CertifyOptions,
    StabilityConstants,
    StabilityReport,
    certify,
    check_kkt,
    estimate_lipschitz,
    estimate_quadratic_remainder,
    jacobian_E,
    lyapunov_P,
    solve_target_problem,
    convergence_certificate,
    verify_envelope,
)
from .controller import ControllerConfig, SafeGradientFlow, safe_gradient_flow, steady_flow
from .plants import LtiPlant, UnicyclePlant, make_plant
from .problem import OptimizationSpec, make_spec, quadratic_spec, unicycle_spec
from .qp import QpProblem, QpSolution, solve_qp
from .scenario import load_scenario
from .simulator import SimConfig, Trajectory, simulate

__version__ = "0.1.0"

__all__ = [
    "CertifyOptions",
    "ControllerConfig",
    "LtiPlant",
    "OptimizationSpec",
    "QpProblem",
    "QpSolution",
    "SafeGradientFlow",
    "SimConfig",
    "StabilityConstants",
    "StabilityReport",
    "Trajectory",
    "UnicyclePlant",
    "certify",
    "check_kkt",
    "estimate_lipschitz",
    "estimate_quadratic_remainder",
    "jacobian_E",
    "load_scenario",
    "lyapunov_P",
    "make_plant",
    "make_spec",
    "quadratic_spec",
    "safe_gradient_flow",
    "simulate",
    "solve_qp",
    "solve_target_problem",
    "steady_flow",
    "convergence_certificate",
    "unicycle_spec",
    "verify_envelope",
]

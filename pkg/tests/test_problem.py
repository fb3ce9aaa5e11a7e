import numpy as np
import pytest

from safeflow.exceptions import ConfigurationError
from safeflow.problem import (
    OptimizationSpec,
    check_derivatives,
    eval_objective,
    fd_jacobian,
    feasibility_report,
    lti_quadratic_spec,
    make_spec,
    quadratic_spec,
    unicycle_spec,
)


def test_fd_jacobian_of_linear_map():
    M = np.array([[1.0, 2.0], [3.0, -4.0], [0.5, 0.0]])
    np.testing.assert_allclose(fd_jacobian(lambda v: M @ v, np.array([0.3, -1.0])), M, atol=1e-8)


@pytest.mark.parametrize("spec", [unicycle_spec(), lti_quadratic_spec(), lti_quadratic_spec(u_bound=0.3)],
                         ids=lambda s: s.name)
def test_shipped_specs_pass_derivative_check(spec):
    assert check_derivatives(spec, n_points=100, seed=0) == []


def test_wrong_gradient_is_rejected():
    with pytest.raises(ConfigurationError, match="finite differences"):
        OptimizationSpec(
            n_u=1, n_x=1,
            phi=lambda u: float(u @ u), grad_phi=lambda u: u,  # should be 2u
            psi=lambda x: 0.0, grad_psi=lambda x: np.zeros(1),
        )


def test_missing_constraint_callables():
    with pytest.raises(ConfigurationError):
        OptimizationSpec(n_u=1, n_x=1, phi=lambda u: 0.0, grad_phi=lambda u: np.zeros(1),
                         psi=lambda x: 0.0, grad_psi=lambda x: np.zeros(1), p=1)


def test_unicycle_spec_rows_and_values():
    spec = unicycle_spec()
    assert (spec.n_u, spec.n_x, spec.p, spec.m) == (2, 2, 1, 4)
    u = np.array([1.0, -2.0])
    np.testing.assert_allclose(spec.gamma_values(u), [1 - 10, -1 - 10, -2 - 10, 2 - 10])
    np.testing.assert_allclose(spec.ell_values(np.array([0.6, 0.8])), [0.1])
    assert eval_objective(spec, np.zeros(2), np.array([0.6, 0.8])) == 0.0


def test_feasibility_report():
    spec = unicycle_spec()
    rep = feasibility_report(spec, np.zeros(2), np.array([1.0, 0.0]))
    assert not rep.feasible
    assert rep.max_violation == pytest.approx(0.1)
    assert feasibility_report(spec, np.zeros(2), np.zeros(2)).feasible


def test_quadratic_spec_empty_blocks():
    spec = quadratic_spec(2, 2, Q=np.eye(2))
    assert spec.p == spec.m == 0
    assert spec.ell_values(np.zeros(2)).shape == (0,)
    assert spec.gamma_jacobian(np.zeros(2)).shape == (0, 2)


def test_make_spec_catalog_and_quadratic():
    assert make_spec({"catalog": "unicycle_v"}).name == "unicycle_v"
    spec = make_spec({"quadratic": {"n_u": 1, "n_x": 1, "Q": [[1.0]], "u_box": [[-1.0], [1.0]]}})
    assert spec.m == 2
    np.testing.assert_allclose(spec.u_bounds[0], [-1.0])
    with pytest.raises(ConfigurationError):
        make_spec({"catalog": "nope"})
    with pytest.raises(ConfigurationError):
        make_spec({"quadratic": {"n_u": 1, "n_x": 1, "bogus": 1}})

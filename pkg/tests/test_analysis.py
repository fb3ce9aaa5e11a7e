import json
import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from safeflow import analysis as an
from safeflow.controller import ControllerConfig
from safeflow.exceptions import EtaOutOfRange, InvalidS, MissingErrorChannel, NotNegativeDefinite
from safeflow.plants import LtiPlant, UnicyclePlant, lti_default
from safeflow.problem import lti_quadratic_spec, quadratic_spec, unicycle_spec

UNIT = an.StabilityConstants(d1=1, d2=1, d3=1, d4=1, d5=1, l_Fx=1, l_Fu=1, l_hu=1,
                             e1=1, e2=1, L=1, delta=1, kappa=1, s=1)


def _identity_plant(n):
    # x' = -x + u, so h(u) = u and J_h = I
    return LtiPlant(-np.eye(n), np.eye(n))


def test_target_problem_unicycle():
    spec, plant = unicycle_spec(), UnicyclePlant(2.0)
    sol = an.solve_target_problem(spec, plant, np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(sol.u, math.sqrt(0.9) * np.array([0.6, 0.8]), atol=1e-8)
    assert sol.active == (0,) and sol.licq and sol.strict_complementarity
    # stationarity along the ray: 0.1 u + 2(u - t) + 2 lam u = 0
    assert sol.lam[0] == pytest.approx((2 / math.sqrt(0.9) - 2.1) / 2, rel=1e-7)


def test_target_problem_unconstrained_closed_form():
    Q = np.array([[3.0, 1.0], [1.0, 2.0]])
    q = np.array([1.0, -1.0])
    spec = quadratic_spec(2, 2, Q=Q, q=q)
    sol = an.solve_target_problem(spec, _identity_plant(2), np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(sol.u, np.linalg.solve(Q, -q), atol=1e-9)
    assert sol.lam.shape == (0,)


def test_target_problem_box_face():
    # separable quadratic with minimizer (2, -0.5) and box [-1, 1]^2
    spec = quadratic_spec(2, 2, Q=np.eye(2), q=[-2.0, 0.5], u_box=([-1, -1], [1, 1]))
    sol = an.solve_target_problem(spec, _identity_plant(2), np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(sol.u, [1.0, -0.5], atol=1e-9)
    assert sol.lam[0] == pytest.approx(1.0) and sol.active == (0,)


def test_check_kkt_detects_perturbation():
    spec, plant = unicycle_spec(), UnicyclePlant(2.0)
    sol = an.solve_target_problem(spec, plant, np.zeros(2), np.zeros(2))
    good = an.check_kkt(spec, plant, np.zeros(2), sol.u, sol.lam)
    assert good.passed and good.flow_norm <= 1e-6
    bad = an.check_kkt(spec, plant, np.zeros(2), sol.u + 1e-2, sol.lam)
    assert not bad.passed and bad.residual >= 1e-3
    with pytest.raises(ValueError):
        an.check_kkt(spec, plant, np.zeros(2), sol.u, np.zeros(2))


def test_multipliers_from_flow_match_oracle():
    spec, plant = lti_quadratic_spec(u_bound=0.3), lti_default()
    w = np.zeros(3)
    sol = an.solve_target_problem(spec, plant, w, np.zeros(2))
    np.testing.assert_allclose(an.multipliers_from_flow(spec, plant, w, sol.u), sol.lam, atol=1e-8)


def test_jacobian_unconstrained_is_minus_Q():
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    spec = quadratic_spec(2, 2, Q=Q)
    res = an.jacobian_E(spec, _identity_plant(2), np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(res.E, -Q, atol=1e-8)
    assert res.consistency < 1e-3


def test_jacobian_single_linear_constraint():
    # phi = |u - (2, 1)|^2 / 2 with u_0 <= 1: tangent direction decays at rate 1,
    # the active row pins theta_0 = -beta (u_0 - 1), so the normal rate is beta
    spec = quadratic_spec(2, 2, Q=np.eye(2), q=[-2.0, -1.0], gamma_rows=[{"a": [1.0, 0.0], "c": -1.0}])
    beta = 10.0
    res = an.jacobian_E(spec, _identity_plant(2), np.zeros(2), np.array([1.0, 1.0]), ControllerConfig(beta=beta))
    np.testing.assert_allclose(res.E, np.diag([-beta, -1.0]), atol=1e-7)
    assert (res.e1, res.e2) == pytest.approx((1.0, beta))


def test_jacobian_unicycle_constants():
    spec, plant = unicycle_spec(), UnicyclePlant(2.0)
    sol = an.solve_target_problem(spec, plant, np.zeros(2), np.zeros(2))
    res = an.jacobian_E(spec, plant, np.zeros(2), sol.u)
    assert res.e1 > 0 and res.e2 == pytest.approx(10.0, rel=1e-6)
    assert res.consistency < 1e-3


def test_jacobian_not_negative_definite():
    # concave cost: F = +u near zero
    spec = quadratic_spec(1, 1, Q=[[-1.0]])
    with pytest.raises(NotNegativeDefinite):
        an.jacobian_E(spec, _identity_plant(1), np.zeros(1), np.zeros(1))


@pytest.mark.parametrize("E,kappa,P", [
    (-np.eye(3), 2.0, np.eye(3)),
    (np.diag([-1.0, -4.0]), 1.0, np.diag([0.5, 0.125])),
])
def test_lyapunov_closed_forms(E, kappa, P):
    np.testing.assert_allclose(an.lyapunov_P(E, kappa), P, atol=1e-14)


def test_lyapunov_sandwich_on_random_matrix(rng):
    G = rng.normal(size=(4, 4))
    E = -(G @ G.T + np.eye(4))
    P = an.lyapunov_P(E, 1.0)
    sym = np.linalg.eigvalsh(E)
    lo, hi, _, _ = an.lyapunov_sandwich(P, -sym[-1], -sym[0], 1.0, seed=0)
    assert lo and hi


def test_lipschitz_affine_band_and_monotone(rng):
    M = rng.normal(size=(3, 2))
    box = (-np.ones(2), np.ones(2))
    est = an.estimate_lipschitz(lambda v: M @ v + 1.0, box, 100, seed=0)
    slope = np.linalg.norm(M, 2)
    assert 0.9 * slope <= est.raw <= slope + 1e-12
    assert est.value == pytest.approx(1.5 * est.raw)
    raws = [an.estimate_lipschitz(lambda v: np.sin(3 * v), box, n, seed=5).raw for n in (10, 20, 40, 80)]
    assert all(b >= a for a, b in zip(raws, raws[1:]))
    with pytest.raises(ValueError):
        an.estimate_lipschitz(lambda v: v, box, 1)


def test_lipschitz_of_gradient_flow_recovers_Q():
    Q = np.diag([3.0, 1.0])
    spec = quadratic_spec(2, 2, Q=Q)
    plant = _identity_plant(2)
    from safeflow.controller import steady_flow

    est = an.estimate_lipschitz(lambda u: steady_flow(spec, plant, u, np.zeros(2), ControllerConfig()),
                                (-np.ones(2), np.ones(2)), 100, seed=1)
    assert 3.0 * 0.9 <= est.raw <= 3.0 + 1e-9 and est.value <= 4.5 + 1e-9


def test_quadratic_remainder_vanishes_for_linear_field():
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    spec = quadratic_spec(2, 2, Q=Q)
    L, delta, raw = an.estimate_quadratic_remainder(spec, _identity_plant(2), np.zeros(2), np.zeros(2), -Q, 0.5, seed=0)
    assert raw < 1e-6 and delta == 0.5


def test_quadratic_remainder_shrinking_ball():
    spec, plant = unicycle_spec(), UnicyclePlant(2.0)
    sol = an.solve_target_problem(spec, plant, np.zeros(2), np.zeros(2))
    E = an.jacobian_E(spec, plant, np.zeros(2), sol.u).E
    _, _, raw1 = an.estimate_quadratic_remainder(spec, plant, np.zeros(2), sol.u, E, 0.5, seed=0)
    _, _, raw2 = an.estimate_quadratic_remainder(spec, plant, np.zeros(2), sol.u, E, 0.25, seed=0)
    assert np.isfinite(raw1) and raw2 <= 1.5 * raw1


def test_unit_constants_hand_example():
    r = an.convergence_certificate(UNIT, 0.1)
    assert r.theta == pytest.approx(1 / 3, abs=1e-15)
    assert r.eta_star_1 == pytest.approx(0.25, abs=1e-15) and r.eta_star_2 == pytest.approx(0.25, abs=1e-15)
    np.testing.assert_allclose(r.M, [[8 / 3, -2 / 3], [-2 / 3, 2 / 3]], atol=1e-14)
    assert r.m_positive_definite and r.eta_in_range and r.certified


def test_certificate_is_pure():
    a = json.dumps(an.convergence_certificate(UNIT, 0.1).to_dict(), sort_keys=True)
    b = json.dumps(an.convergence_certificate(UNIT, 0.1).to_dict(), sort_keys=True)
    assert a == b


def test_small_eta_makes_M_definite():
    c = replace(UNIT, l_Fu=5.0, l_Fx=3.0)
    m12 = [an.convergence_certificate(c, eta).M[0, 1] for eta in (1e-2, 1e-4, 1e-6)]
    assert len(set(np.round(m12, 12))) == 1
    assert an.convergence_certificate(c, 1e-6).m_positive_definite


def test_eta_out_of_range_reported_and_strict():
    r = an.convergence_certificate(UNIT, 0.5)
    assert not r.eta_in_range and any("EtaOutOfRange" in n for n in r.notes)
    with pytest.raises(EtaOutOfRange):
        an.convergence_certificate(UNIT, 0.5, strict=True)


def test_s_branches_and_radius_monotone():
    assert an.s_min(1.0, 1.0, 2.0) == 0.0
    assert an.s_min(1.0, 4.0, 0.1) == pytest.approx(0.6)
    c = replace(UNIT, L=4.0, delta=0.1)
    with pytest.raises(InvalidS):
        an.convergence_certificate(replace(c, s=0.6), 0.1)
    radii = [an.convergence_certificate(replace(c, s=s), 0.1).input_radius for s in (0.61, 0.8, 1.0)]
    assert radii[0] > radii[1] > radii[2] == 0.0
    assert radii[0] < c.delta


@pytest.mark.parametrize("kappa", [0.1, 1.0, 10.0])
def test_theta_in_unit_interval(kappa):
    assert 0 < an.convergence_certificate(replace(UNIT, kappa=kappa), 0.1).theta < 1


def test_alpha0_takes_smaller_bound():
    c = replace(UNIT, M_u=2.0, r0=10.0, diam_X_eq=1.0, l_Fx=3.0)
    r = an.convergence_certificate(c, 0.01)
    assert r.alpha_0 == min(r.alpha_0_bounds["with_d4"], r.alpha_0_bounds["with_l_Fx"])
    assert r.alpha_0_bounds["binding"] == "with_l_Fx"


def test_optimize_kappa_not_worse_than_default():
    c = replace(UNIT, e1=0.5, e2=2.0, l_Fx=2.0)
    k = an.optimize_kappa(c, 0.01)
    score = lambda kk: (lambda r: r.lambda_M * r.r2)(an.convergence_certificate(replace(c, kappa=kk), 0.01))
    assert score(k) >= score(1.0) - 1e-12


def _fake_traj(times, err, u_star):
    inputs = np.tile(u_star, (len(times), 1))
    return SimpleNamespace(times=times, error=err, inputs=inputs, meta={"u_star": list(u_star)})


def test_envelope_trivial_at_equilibrium():
    r = an.convergence_certificate(UNIT, 0.1)
    t = np.linspace(0, 10, 50)
    assert an.verify_envelope(_fake_traj(t, np.zeros(50), [0.0]), r).passed


def test_envelope_catches_slow_decay():
    r = an.convergence_certificate(UNIT, 0.1)
    t = np.linspace(0, 200, 400)
    slow = 1e-3 * np.exp(-0.1 * r.decay_rate * t)
    v = an.verify_envelope(_fake_traj(t, slow, [0.0]), r, t0=0.0)
    assert not v.passed
    fast = 1e-3 * np.exp(-2 * r.decay_rate * t)
    assert an.verify_envelope(_fake_traj(t, fast, [0.0]), r, t0=0.0).passed


def test_envelope_needs_error_channel():
    r = an.convergence_certificate(UNIT, 0.1)
    with pytest.raises(MissingErrorChannel):
        an.verify_envelope(SimpleNamespace(error=None), r)


def test_lti_lyapunov_constants():
    d = an.lti_lyapunov_constants(lti_default())
    assert 0 < d["d1"] <= d["d2"] and d["d3"] == 1.0
    assert d["d4"] == pytest.approx(2 * d["d2"])


def test_certify_lti_report_serializes():
    spec, plant = lti_quadratic_spec(), lti_default()
    rep = an.certify(spec, plant, np.zeros(3), options=an.CertifyOptions(n_samples=40))
    data = json.loads(json.dumps(rep.to_dict()))
    assert data["extra"]["d_source"] == "lyapunov"
    assert set(data["alpha_0_bounds"]) >= {"with_d4", "with_l_Fx", "binding"}
    assert len(data["E"]) == 2 and len(data["P"]) == 2

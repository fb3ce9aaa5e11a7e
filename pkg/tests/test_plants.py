import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeflow.exceptions import ConfigurationError, NotHurwitz
from safeflow.plants import (
    LtiPlant,
    UnicyclePlant,
    check_plant_contract,
    dynamics,
    lti_default,
    make_plant,
    stability_certificate,
    steady_state,
    wrap_angle,
)


def test_unicycle_field_at_initial_condition():
    # xi = 1, bearing error pi/2: v1 = 0, v2 = 2(0 + 1) + 2 (pi/2)
    plant = UnicyclePlant(2.0)
    np.testing.assert_allclose(dynamics(plant, [0.0, -1.0, 0.0], [0.0, 0.0], [0.0, 0.0]),
                               [0.0, 0.0, 2.0 + math.pi], atol=1e-15)


def test_unicycle_equilibrium_and_freeze():
    plant = UnicyclePlant(2.0)
    u = np.array([0.3, 0.4])
    np.testing.assert_array_equal(plant.f(np.array([0.3, 0.4, 1.0]), u, np.zeros(2)), np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(st.floats(-50.0, 50.0))
def test_wrap_angle_range(angle):
    a = wrap_angle(angle)
    assert -math.pi < a <= math.pi
    assert math.isclose(math.cos(a), math.cos(angle), abs_tol=1e-9)


def test_wrap_angle_boundary():
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(math.pi) == math.pi


def test_unicycle_inner_loop_converges():
    plant = UnicyclePlant(2.0)
    rng = np.random.default_rng(0)
    dt = 1e-2
    for _ in range(10):
        u = rng.uniform(-1, 1, 2)
        x = np.concatenate([rng.uniform(-1, 1, 2), rng.uniform(-math.pi, math.pi, 1)])
        for _ in range(int(10.0 / dt)):
            k1 = plant.f(x, u, 0)
            k2 = plant.f(x + 0.5 * dt * k1, u, 0)
            k3 = plant.f(x + 0.5 * dt * k2, u, 0)
            k4 = plant.f(x + dt * k3, u, 0)
            x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        assert np.linalg.norm(x[:2] - u) < 1e-4


def test_lti_steady_state_and_sensitivity():
    plant = lti_default()
    u = np.array([0.2, -0.1])
    w = np.array([0.01, 0.0, -0.02])
    xs = steady_state(plant, u, w)
    np.testing.assert_allclose(plant.f(xs, u, w), 0.0, atol=1e-14)
    np.testing.assert_allclose(plant.jac_h(u), -np.linalg.solve(plant.A, plant.B))


def test_lti_rejects_unstable():
    with pytest.raises(NotHurwitz):
        LtiPlant([[0.1, 0.0], [0.0, -1.0]], [[1.0], [0.0]])


@pytest.mark.parametrize("plant", [UnicyclePlant(2.0), lti_default()], ids=["unicycle", "lti"])
def test_plant_contract(plant):
    assert check_plant_contract(plant, n_points=100, seed=1)["ok"]


def test_stability_certificate_bounds_step_responses():
    k, a = stability_certificate(lti_default())
    assert k >= 1.0 and a > 0


def test_make_plant():
    assert isinstance(make_plant({"family": "unicycle", "k": 3.0}), UnicyclePlant)
    assert make_plant({"family": "lti", "preset": "default"}).n_x == 3
    with pytest.raises(ConfigurationError):
        make_plant({"family": "boat"})
    with pytest.raises(ConfigurationError):
        make_plant({"family": "unicycle", "speed": 1})
    with pytest.raises(ConfigurationError):
        UnicyclePlant(-1.0)

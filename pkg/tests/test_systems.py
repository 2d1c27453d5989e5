"""Unit tests for the spring-mass and Dubins benchmark systems."""

import math

import numpy as np
import pytest

from covcal.errors import SingularMeasurement
from covcal.filters import check_jacobians, simulate
from covcal.systems import (
    BEACONS,
    dubins_model,
    dubins_runs,
    dubins_sim_config,
    generate_sequences,
    spring_mass_input,
    spring_mass_model,
    wrap_angle,
)


class TestSpringMass:
    def test_discrete_dynamics_matrix(self):
        model = spring_mass_model()
        a = model.A(np.zeros(2), [0.0], 0.01)
        assert a[1][0] == pytest.approx(-0.04)
        assert a[1][1] == pytest.approx(0.999)
        assert a[0][1] == pytest.approx(0.01)

    def test_forcing_at_one_second(self):
        u = spring_mass_input(200)
        assert u[100, 0] == pytest.approx(math.sin(math.pi / 2.0), abs=1e-12)

    def test_measures_position_only(self):
        model = spring_mass_model()
        np.testing.assert_array_equal(model.C(np.zeros(2)), [[1.0, 0.0]])
        assert model.h(np.array([2.0, 5.0]))[0] == 2.0

    def test_noise_matrices(self):
        model = spring_mass_model()
        np.testing.assert_allclose(model.R.full(), np.diag([0.0, 0.003**2]))
        np.testing.assert_allclose(model.Q.full(), [[0.005**2]])


class TestDubinsMeasurement:
    def test_hand_geometry(self):
        model = dubins_model()
        y = model.h(np.array([0.0, 0.0, 1.0, 0.0]))
        # beacon 2 at (10, 10): range sqrt(200), bearing pi/4
        assert y[2] == pytest.approx(math.sqrt(200.0))
        assert y[3] == pytest.approx(math.pi / 4.0)

    def test_heading_cancels_bearing(self):
        model = dubins_model()
        y = model.h(np.array([0.0, 0.0, 1.0, math.pi / 4.0]))
        assert y[3] == pytest.approx(0.0, abs=1e-12)

    def test_range_jacobian_hand_value(self):
        model = dubins_model()
        c = model.C(np.array([0.0, 0.0, 1.0, 0.0]))
        # d(range to beacon 2)/dx at the origin is -10/sqrt(200)
        assert c[2, 0] == pytest.approx(-10.0 / math.sqrt(200.0))

    def test_range_invariant_to_heading(self):
        model = dubins_model()
        y1 = model.h(np.array([1.0, 2.0, 0.5, 0.0]))
        y2 = model.h(np.array([1.0, 2.0, 0.5, 2.5]))
        np.testing.assert_allclose(y1[0::2], y2[0::2])

    def test_bearing_jacobian_wrt_heading(self):
        model = dubins_model()
        c = model.C(np.array([1.0, -2.0, 1.0, 0.3]))
        np.testing.assert_array_equal(c[1::2, 3], -1.0)

    def test_bearings_wrapped(self):
        model = dubins_model()
        rng = np.random.default_rng(12)
        for _ in range(50):
            x = np.array([*rng.uniform(-3, 3, 2), 1.0, rng.uniform(-20, 20)])
            y = model.h(x)
            assert np.all(np.abs(y[1::2]) <= math.pi)

    def test_beacon_collision_raises(self):
        model = dubins_model()
        with pytest.raises(SingularMeasurement):
            model.h(np.array([BEACONS[0, 0], BEACONS[0, 1], 1.0, 0.0]))

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(77)
        worst = check_jacobians(dubins_model(), rng, count=20, dt=0.1, u_dim=2)
        assert worst < 1e-5


class TestDubinsDynamics:
    def test_straight_line_exact(self):
        model = dubins_model()
        x = np.array([0.0, 0.0, 2.0, 0.7])
        u = np.zeros(2)
        for k in range(1, 20):
            x = model.f(x, u, 0.1)
            t = 0.1 * k
            expected = np.array(
                [2.0 * t * math.cos(0.7), 2.0 * t * math.sin(0.7), 2.0, 0.7]
            )
            np.testing.assert_allclose(x, expected, atol=1e-9)

    def test_inputs_integrate(self):
        model = dubins_model()
        x = model.f(np.array([0.0, 0.0, 1.0, 0.0]), np.array([0.5, 0.2]), 0.1)
        assert x[2] == pytest.approx(1.05)
        assert x[3] == pytest.approx(0.02)

    def test_turn_rate_curves_trajectory(self):
        # constant omega, zero acceleration: circular arc of radius v/omega
        model = dubins_model()
        x = np.array([0.0, 0.0, 1.0, 0.0])
        u = np.array([0.0, 0.5])
        for _ in range(100):
            x = model.f(x, u, 0.1)
        t = 10.0
        radius = 1.0 / 0.5
        np.testing.assert_allclose(
            x[:2],
            [radius * math.sin(0.5 * t), radius * (1.0 - math.cos(0.5 * t))],
            atol=1e-6,
        )


class TestWrapAngle:
    def test_range(self):
        angles = np.linspace(-20.0, 20.0, 1001)
        wrapped = wrap_angle(angles)
        assert np.all(wrapped > -math.pi)
        assert np.all(wrapped <= math.pi)

    def test_identity_inside(self):
        np.testing.assert_allclose(wrap_angle(0.5), 0.5)
        np.testing.assert_allclose(wrap_angle(-3.0), -3.0)

    def test_wraps_multiples(self):
        assert wrap_angle(2.0 * math.pi + 0.1) == pytest.approx(0.1)
        assert wrap_angle(-2.0 * math.pi - 0.1) == pytest.approx(-0.1)


class TestSequences:
    def test_deterministic(self):
        s1 = generate_sequences(seed=99)
        s2 = generate_sequences(seed=99)
        assert s1 == s2

    def test_frequency_fixed(self):
        for spec in generate_sequences(seed=1):
            assert spec.freq == 0.5

    def test_count_and_test_convention(self):
        specs = generate_sequences(seed=2, count=12)
        assert len(specs) == 12
        # the last generated sequence is the held-out test sequence
        assert specs[-1] is specs[11]

    def test_input_shapes(self):
        spec = generate_sequences(seed=3, steps=40)[0]
        u = spec.inputs()
        assert u.shape == (40, 2)
        np.testing.assert_array_equal(u[:, 1], spec.omega_const)
        # 0.5 Hz sinusoid at dt = 0.1 crosses zero every 10 steps
        assert u[0, 0] == pytest.approx(0.0)
        assert abs(u[10, 0]) < 1e-9

    def test_amplitude_and_omega_ranges(self):
        for spec in generate_sequences(seed=4):
            assert 0.5 <= spec.amplitude <= 2.0
            assert -0.5 <= spec.omega_const <= 0.5


class TestDubinsSimulation:
    def test_runs_deterministic(self):
        spec = generate_sequences(seed=5, steps=80)[0]
        a = dubins_runs(spec, runs=2)
        b = dubins_runs(spec, runs=2)
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.x_true, tb.x_true)
            np.testing.assert_array_equal(ta.p_hat, tb.p_hat)

    def test_small_state_error(self):
        spec = generate_sequences(seed=6, steps=300)[-1]
        trace = simulate(dubins_model(), dubins_sim_config(spec, run_seed=123))
        err = trace.errors()
        # position errors stay well inside the beacon arena
        assert np.max(np.abs(err[:, :2])) < 2.0

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skistunt.vehicle import (ControlInput, DegenerateGeometryError, VehicleParams, VehicleState,
                              drift_and_input, full_steer_torque, nominal_dynamics, planar_accel,
                              planar_input_matrix, planar_input_matrix_inv, roll_terms,
                              roll_terms_dphi, steer_from_yaw_rate, synthetic_residual,
                              true_plant_dynamics, yaw_rate_from_steer)

finite = st.floats(-10, 10, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)


class TestParams:
    def test_lever_arm_from_offsets(self, params):
        assert abs(params.l_G - math.sqrt(0.25 ** 2 + 0.29 ** 2)) < 1e-12

    def test_tabulated_tilt_is_kept(self, params):
        assert params.phi_G == pytest.approx(math.radians(40.0))
        # geometric value differs by about three quarters of a degree
        assert math.degrees(params.phi_G_geometric) == pytest.approx(40.76, abs=0.01)
        assert abs(math.degrees(params.phi_G_geometric - params.phi_G)) < 1.0

    @pytest.mark.parametrize("kw", [{"m": 0.0}, {"J_t": -1.0}, {"l_1": 0.0},
                                    {"phi_G": 0.0}, {"phi_G": math.pi / 2}])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            VehicleParams(**kw)

    def test_with_recomputes_lever(self, params):
        p = params.with_(y_G=0.3, z_G=0.4)
        assert p.l_G == pytest.approx(0.5)


class TestPlanar:
    @pytest.mark.parametrize("v,psi,u,expected", [
        (1.0, 0.0, (1.0, 0.0), (1.0, 0.0)),
        (1.0, 0.0, (0.0, 1.0), (0.0, 1.0)),
        (2.0, math.pi / 4, (1.0, 0.5), (0.0, 1.41421)),
    ])
    def test_planar_accel(self, v, psi, u, expected):
        acc = planar_accel(VehicleState(v=v, psi=psi), ControlInput(*u))
        np.testing.assert_allclose(acc, expected, atol=1e-5)

    @given(v=st.floats(0.05, 10), psi=angle)
    def test_inverse(self, v, psi):
        g = planar_input_matrix(v, psi)
        assert np.linalg.det(g) == pytest.approx(v, rel=1e-9)
        np.testing.assert_allclose(g @ planar_input_matrix_inv(v, psi), np.eye(2), atol=1e-10)

    def test_inverse_singular(self):
        with pytest.raises(ZeroDivisionError):
            planar_input_matrix_inv(0.0, 0.3)

    @given(x=finite, y=finite, psi=angle, v=finite, phi=st.floats(-1, 1), phid=finite)
    def test_kinematic_consistency(self, x, y, psi, v, phi, phid):
        s = VehicleState(x, y, psi, v, phi, phid)
        assert s.x_dot == pytest.approx(v * math.cos(psi), abs=1e-9)
        assert s.y_dot == pytest.approx(v * math.sin(psi), abs=1e-9)
        assert VehicleState.from_array(s.array()) == s

    def test_input_must_be_finite(self):
        with pytest.raises(ValueError):
            ControlInput(math.nan, 0.0)


class TestSteer:
    def test_zero_steer(self, params):
        assert yaw_rate_from_steer(3.0, 0.0, 0.4, params) == 0.0

    def test_values(self, params):
        # 2 * 0.1 / (0.48 * cos 40deg) = 0.543920
        assert yaw_rate_from_steer(2.0, math.atan(0.1), math.radians(40), params) == \
            pytest.approx(0.2 / (0.48 * math.cos(math.radians(40))), rel=1e-12)
        assert yaw_rate_from_steer(2.0, math.atan(0.1), math.radians(40), params) == \
            pytest.approx(0.5439, abs=1e-4)
        assert yaw_rate_from_steer(1.0, math.atan(0.48), 0.0, params) == pytest.approx(1.0)

    def test_degenerate(self, params):
        with pytest.raises(DegenerateGeometryError):
            yaw_rate_from_steer(1.0, 0.1, math.pi / 2, params)
        with pytest.raises(DegenerateGeometryError):
            steer_from_yaw_rate(1.0, 0.1, -math.pi / 2, params)

    @given(v=st.floats(0.1, 8), steer=st.floats(-1.2, 1.2), phi_r=st.floats(-1.2, 1.2))
    def test_round_trip(self, params, v, steer, phi_r):
        r = yaw_rate_from_steer(v, steer, phi_r, params)
        assert steer_from_yaw_rate(v, r, phi_r, params) == pytest.approx(steer, abs=1e-9)


class TestRoll:
    def test_upright_has_no_drift(self, params):
        assert roll_terms(VehicleState(v=3.0), params)[0] == 0.0

    def test_values(self, params):
        f, _ = roll_terms(VehicleState(phi=math.radians(10)), params)
        assert f == pytest.approx(11.4 * 9.81 * math.hypot(0.25, 0.29) * math.sin(math.radians(10)) / 1.35,
                                  rel=1e-12)
        assert f == pytest.approx(5.508, abs=1e-3)
        _, g = roll_terms(VehicleState(v=3.0), params)
        assert g == pytest.approx(9.699, abs=1e-3)

    def test_upright_is_unstable(self, params):
        df, _ = roll_terms_dphi(VehicleState(), params)
        assert df == pytest.approx(params.m * params.g * params.l_G / params.J_t)
        assert df > 0

    @given(phi=st.floats(-1.4, 1.4), v=st.floats(-5, 5))
    def test_dphi_matches_fd(self, params, phi, v):
        h = 1e-6
        a = roll_terms(VehicleState(v=v, phi=phi + h), params)
        b = roll_terms(VehicleState(v=v, phi=phi - h), params)
        d = roll_terms_dphi(VehicleState(v=v, phi=phi), params)
        np.testing.assert_allclose(d, (np.array(a) - b) / (2 * h), atol=1e-5)


class TestNominal:
    def test_rest(self, params):
        s = VehicleState(1.0, 2.0, 0.3, 0.0, 0.0, 0.0)
        np.testing.assert_array_equal(nominal_dynamics(s, ControlInput(), params), np.zeros(6))

    def test_moving_no_input(self, params):
        s = VehicleState(psi=0.4, v=2.0, phi=0.2, phi_dot=0.3)
        d = nominal_dynamics(s, ControlInput(), params)
        np.testing.assert_allclose(d[:3], [s.x_dot, s.y_dot, 0.3])
        assert d[5] == pytest.approx(roll_terms(s, params)[0])

    def test_stacked(self, params):
        s = VehicleState(v=1.0)
        d = nominal_dynamics(s, ControlInput(1.0, 1.0), params)
        np.testing.assert_allclose(d[3:], [1.0, 1.0, roll_terms(s, params)[1]])

    @given(psi=angle, v=finite, phi=st.floats(-1, 1))
    def test_planar_drift_is_zero(self, params, psi, v, phi):
        f, g = drift_and_input(VehicleState(psi=psi, v=v, phi=phi), params)
        assert f[0] == 0.0 and f[1] == 0.0
        assert g[2, 0] == 0.0


class TestPlant:
    @pytest.mark.parametrize("v", [0.5, 2.0, 5.0])
    def test_no_planar_residual_heading_east(self, v):
        r = synthetic_residual(VehicleState(v=v, psi=0.0, phi=0.3))
        assert r[0] == 0.0 and r[1] == 0.0

    def test_residual_values(self):
        r = synthetic_residual(VehicleState(v=2.0, psi=math.pi / 4))
        np.testing.assert_allclose(r, [0.35355, 0.5, 0.0], atol=1e-5)
        r = synthetic_residual(VehicleState(v=3.0, phi=math.radians(10), phi_dot=0.1))
        assert r[2] == pytest.approx(2.25 * math.sin(math.radians(10)) - 0.025, rel=1e-12)
        assert r[2] == pytest.approx(0.36571, abs=1e-5)

    def test_plant_is_nominal_plus_residual(self, params):
        s = VehicleState(1, 2, 0.7, 2.5, -0.2, 0.4)
        u = ControlInput(0.3, -0.6)
        d = true_plant_dynamics(s, u, params) - nominal_dynamics(s, u, params)
        np.testing.assert_allclose(d[3:], synthetic_residual(s), atol=1e-14)
        np.testing.assert_array_equal(d[:3], 0.0)

    def test_high_fidelity_torque_reduces_to_simplified(self, params):
        # with zero CoM offset, zero yaw inertias and slow yaw, only the v l_G m cos(phi) term survives
        s = VehicleState(v=2.0, phi=0.1)
        tau = full_steer_torque(s, 1e-4, 0.0, params, x_G=0.0, J_y=0.0, J_z=0.0)
        g_phi = roll_terms(s, params)[1]
        assert tau / params.J_t == pytest.approx(g_phi * 1e-4, rel=1e-3)
        hf = true_plant_dynamics(s, ControlInput(0, 1e-4), params,
                                 high_fidelity={"x_G": 0.0, "J_y": 0.0, "J_z": 0.0})
        lo = true_plant_dynamics(s, ControlInput(0, 1e-4), params)
        assert hf[5] == pytest.approx(lo[5], abs=1e-6)

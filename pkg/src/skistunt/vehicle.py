"""Nominal planar + roll dynamics of the tilted truck and the synthetic ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels

GRAVITY = 9.81
_COS_EPS = 1e-6


class DegenerateGeometryError(ValueError):
    """Raised when the yaw/steer map is singular (roll near +-90 deg)."""


@dataclass(frozen=True)
class VehicleParams:
    """Physical constants of the scaled truck (defaults: the RC platform).

    ``l_G`` is derived from ``y_G`` and ``z_G``. ``phi_G`` is the tabulated
    static tilt, kept separate from the geometric value on purpose.
    """

    m: float = 11.4
    J_t: float = 1.35
    l_1: float = 0.48
    y_G: float = 0.25
    z_G: float = 0.29
    phi_G: float = math.radians(40.0)
    g: float = GRAVITY
    l_G: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "l_G", math.hypot(self.y_G, self.z_G))
        if self.m <= 0 or self.J_t <= 0 or self.l_1 <= 0 or self.l_G <= 0:
            raise ValueError("mass, inertia, wheelbase and CoM lever arm must be positive")
        if not 0.0 < self.phi_G < math.pi / 2:
            raise ValueError("phi_G must lie in (0, pi/2)")

    @property
    def phi_G_geometric(self) -> float:
        """Tilt offset implied by the CoM offsets, ``pi/2 - atan|z_G/y_G|``."""
        return math.pi / 2 - math.atan(abs(self.z_G / self.y_G))

    def vector(self) -> np.ndarray:
        return np.array([self.m, self.J_t, self.l_1, self.l_G, self.phi_G, self.g])

    def with_(self, **kw) -> "VehicleParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class VehicleState:
    """Rear contact point pose, speed and roll.

    Planar velocities are derived from ``v`` and ``psi`` so the no-slip
    constraint holds by construction.
    """

    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    v: float = 0.0
    phi: float = 0.0
    phi_dot: float = 0.0

    @property
    def x_dot(self) -> float:
        return self.v * math.cos(self.psi)

    @property
    def y_dot(self) -> float:
        return self.v * math.sin(self.psi)

    def array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.v, self.phi, self.phi_dot])

    def chi(self) -> np.ndarray:
        """Configuration/velocity vector ``[x, y, phi, x_dot, y_dot, phi_dot]``."""
        return np.array([self.x, self.y, self.phi, self.x_dot, self.y_dot, self.phi_dot])

    @classmethod
    def from_array(cls, s) -> "VehicleState":
        return cls(*(float(a) for a in s))


@dataclass(frozen=True)
class ControlInput:
    u_v: float = 0.0
    u_psi: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.u_v) and math.isfinite(self.u_psi)):
            raise ValueError("control input must be finite")

    def array(self) -> np.ndarray:
        return np.array([self.u_v, self.u_psi])


def planar_input_matrix(v: float, psi: float) -> np.ndarray:
    """The 2x2 map from ``[u_v, u_psi]`` to planar acceleration; its determinant is ``v``."""
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -v * s], [s, v * c]])


def planar_input_matrix_inv(v: float, psi: float) -> np.ndarray:
    if v == 0.0:
        raise ZeroDivisionError("planar input matrix is singular at v = 0")
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, s], [-s / v, c / v]])


def planar_accel(state: VehicleState, u: ControlInput) -> np.ndarray:
    return planar_input_matrix(state.v, state.psi) @ u.array()


def yaw_rate_from_steer(v: float, steer: float, phi_r: float, params: VehicleParams) -> float:
    """Yaw rate produced by steering angle ``steer`` at total tilt ``phi_r``."""
    c = math.cos(phi_r)
    if abs(c) < _COS_EPS:
        raise DegenerateGeometryError(f"cos(phi_r) = {c:.3g}")
    return v * math.tan(steer) / (params.l_1 * c)


def steer_from_yaw_rate(v: float, yaw_rate: float, phi_r: float, params: VehicleParams) -> float:
    c = math.cos(phi_r)
    if abs(c) < _COS_EPS:
        raise DegenerateGeometryError(f"cos(phi_r) = {c:.3g}")
    if v == 0.0:
        return 0.0
    return math.atan(yaw_rate * params.l_1 * c / v)


def roll_terms(state: VehicleState, params: VehicleParams) -> tuple[float, float]:
    """Gravity drift ``f_phi`` and steering gain ``g_phi`` of the roll equation."""
    k = params.m * params.l_G / params.J_t
    return k * params.g * math.sin(state.phi), k * state.v * math.cos(state.phi)


def roll_terms_dphi(state: VehicleState, params: VehicleParams) -> tuple[float, float]:
    """Partial derivatives of ``(f_phi, g_phi)`` with respect to roll."""
    k = params.m * params.l_G / params.J_t
    return k * params.g * math.cos(state.phi), -k * state.v * math.sin(state.phi)


def drift_and_input(state: VehicleState, params: VehicleParams) -> tuple[np.ndarray, np.ndarray]:
    """``f`` (3,) and ``g`` (3, 2) of the compact model ``[r_ddot; phi_ddot] = f + g u``.

    The planar block of ``f`` is identically zero.
    """
    f_phi, g_phi = roll_terms(state, params)
    f = np.array([0.0, 0.0, f_phi])
    g = np.vstack([planar_input_matrix(state.v, state.psi), [0.0, g_phi]])
    return f, g


def nominal_accel(state: VehicleState, u: ControlInput, params: VehicleParams) -> np.ndarray:
    f, g = drift_and_input(state, params)
    return f + g @ u.array()


def synthetic_residual(state: VehicleState) -> np.ndarray:
    """Unmodelled accelerations ``[f_ux, f_uy, f_uphi]`` used as simulation ground truth."""
    v, c, s = state.v, math.cos(state.psi), math.sin(state.psi)
    return np.array([
        0.5 * v * c * c * s,
        0.5 * v * c * s,
        0.25 * v * v * math.sin(state.phi) - 0.25 * state.phi_dot,
    ])


def nominal_dynamics(state: VehicleState, u: ControlInput, params: VehicleParams) -> np.ndarray:
    """Time derivative of ``chi = [x, y, phi, x_dot, y_dot, phi_dot]`` under the nominal model."""
    acc = nominal_accel(state, u, params)
    return np.concatenate([[state.x_dot, state.y_dot, state.phi_dot], acc])


def full_steer_torque(state: VehicleState, yaw_rate: float, yaw_accel: float,
                      params: VehicleParams, x_G: float, J_y: float, J_z: float) -> float:
    """Unsimplified steer-induced roll torque (centrifugal, gyroscopic and yaw-accel terms).

    Only used by the high-fidelity plant; the control design uses ``m v l_G cos(phi) u_psi``.
    """
    m, lG, phi = params.m, params.l_G, state.phi
    cp, sp = math.cos(phi), math.sin(phi)
    return (m * lG * x_G * yaw_accel * math.cos(state.psi)
            + m * lG ** 2 * yaw_rate ** 2 * sp * cp
            + (cp ** 2 * J_z + sp ** 2 * J_y) * yaw_rate ** 2
            - (m * lG * x_G * state.phi_dot * sp - state.v * lG * m * cp) * yaw_rate)


def true_plant_dynamics(state: VehicleState, u: ControlInput, params: VehicleParams,
                        high_fidelity: dict | None = None) -> np.ndarray:
    """``chi`` derivative of the ground-truth plant: nominal model plus synthetic residual.

    ``high_fidelity`` (keys ``x_G``, ``J_y``, ``J_z``) swaps the simplified steer
    torque for :func:`full_steer_torque` with zero yaw acceleration.
    """
    dchi = nominal_dynamics(state, u, params)
    dchi[3:] += synthetic_residual(state)
    if high_fidelity:
        f_phi, g_phi = roll_terms(state, params)
        tau = full_steer_torque(state, u.u_psi, 0.0, params, **high_fidelity)
        dchi[5] += tau / params.J_t - g_phi * u.u_psi
    return dchi


def state_derivative(state: VehicleState, u: ControlInput, params: VehicleParams,
                     synthetic: bool = True, hold_speed: bool = False) -> np.ndarray:
    """Derivative of ``[x, y, psi, v, phi, phi_dot]``; the integrated representation."""
    s = state.array()[None, :]
    mode = kernels.RES_SYNTH if synthetic else kernels.RES_NONE
    ds, _ = kernels._deriv_np(s, u.array()[None, :], params.vector(), mode, hold_speed,
                              None, None, None, None, None)
    return ds[0]

"""Exponential control barrier functions with a GP-variance margin.

Sign convention: ``h >= 0`` is safe. The obstacle barrier is the squared
distance minus the squared inflated radius, so it is positive outside the
buffered disc.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .vehicle import VehicleParams, VehicleState

OBSTACLE = "obstacle"
ROLL_ANGLE = "roll_angle"
ROLL_RATE = "roll_rate"
KINDS = (OBSTACLE, ROLL_ANGLE, ROLL_RATE)
_DEGREE = {OBSTACLE: 2, ROLL_ANGLE: 2, ROLL_RATE: 1}
DEFAULT_GAMMA = {2: (1.0, 1.5), 1: (1.5,)}
_DEGENERATE_TOL = 1e-9


class DegenerateBarrierWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class BarrierSpec:
    """One barrier. ``gamma`` multiplies ``q = [h, h_dot, ...]``."""

    kind: str
    center: tuple = (0.0, 0.0)
    radius: float = 1.0
    buffer: float = 0.0
    phi_max: float = 0.0
    phi_dot_max: float = 1.0
    phi_G: float = VehicleParams().phi_G
    gamma: tuple = None
    variance_margin: bool = True
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown barrier kind {self.kind!r}")
        gamma = self.gamma if self.gamma is not None else DEFAULT_GAMMA[self.relative_degree]
        gamma = tuple(float(g) for g in gamma)
        object.__setattr__(self, "gamma", gamma)
        if len(gamma) != self.relative_degree:
            raise ValueError("gamma length must equal the relative degree")
        if any(g <= 0 for g in gamma):
            raise ValueError("gamma entries must be positive for a Hurwitz companion matrix")
        if self.kind == OBSTACLE and (self.radius <= 0 or self.buffer < 0):
            raise ValueError("obstacle needs R > 0 and R_eps >= 0")
        if self.kind == ROLL_ANGLE and self.phi_max + self.phi_G <= 0:
            raise ValueError("phi_max + phi_G must be positive")
        if self.kind == ROLL_RATE and self.phi_dot_max <= 0:
            raise ValueError("phi_dot_max must be positive")

    @property
    def relative_degree(self) -> int:
        return _DEGREE[self.kind]

    @property
    def is_roll(self) -> bool:
        return self.kind != OBSTACLE

    @classmethod
    def obstacle(cls, x_c, y_c, radius, buffer=0.0, **kw):
        return cls(OBSTACLE, center=(float(x_c), float(y_c)), radius=radius, buffer=buffer, **kw)

    @classmethod
    def roll_angle(cls, phi_max, phi_G=None, **kw):
        if phi_G is None:
            phi_G = VehicleParams().phi_G
        return cls(ROLL_ANGLE, phi_max=phi_max, phi_G=phi_G, **kw)

    @classmethod
    def roll_rate(cls, phi_dot_max, **kw):
        return cls(ROLL_RATE, phi_dot_max=phi_dot_max, **kw)


@dataclass
class BarrierDerivatives:
    """``q = [h, ..., h^(p-1)]``, drift part ``L_F^p h`` and input row ``L_G L_F^(p-1) h``."""

    q: np.ndarray
    lf: float
    lg: np.ndarray
    degenerate: bool = False


@dataclass
class CbfConstraint:
    """Linear condition ``coeff_u @ u >= rhs``."""

    coeff_u: np.ndarray
    rhs: float
    degenerate: bool = False
    spec: BarrierSpec = field(default=None, repr=False)

    def residual(self, u) -> float:
        return float(self.coeff_u @ np.asarray(u, dtype=float) - self.rhs)

    @property
    def vacuous(self) -> bool:
        return self.degenerate and self.rhs <= 0.0


def _variance_term(spec: BarrierSpec, variance) -> float:
    if variance is None or not spec.variance_margin:
        return 0.0
    variance = np.asarray(variance, dtype=float)
    if spec.kind == OBSTACLE:
        return float(variance[0] + variance[1])
    if spec.kind == ROLL_ANGLE:
        return float(variance[2])
    return 0.0


def barrier_value(spec: BarrierSpec, state: VehicleState, variance=None) -> float:
    """``h`` at ``state``, shrunk by the GP variance where the barrier uses it."""
    if spec.kind == OBSTACLE:
        dx, dy = state.x - spec.center[0], state.y - spec.center[1]
        h = dx * dx + dy * dy - (spec.radius + spec.buffer) ** 2
    elif spec.kind == ROLL_ANGLE:
        h = (spec.phi_max + spec.phi_G) ** 2 - (state.phi + spec.phi_G) ** 2
    else:
        h = spec.phi_dot_max ** 2 - state.phi_dot ** 2
    return h - _variance_term(spec, variance)


def barrier_derivatives(spec: BarrierSpec, state: VehicleState, drift, g, variance=None
                        ) -> BarrierDerivatives:
    """Split the ``p``-th derivative of ``h`` into drift and input parts.

    Args:
        drift: accelerations ``[x, y, phi]`` at zero input, GP mean included.
        g: input matrix (3, 2) mapping ``[u_v, u_psi]`` to those accelerations.
        variance: GP variance; only shifts ``h`` itself (held constant in time).
    """
    drift = np.asarray(drift, dtype=float)
    g = np.asarray(g, dtype=float)
    h = barrier_value(spec, state, variance)
    if spec.kind == OBSTACLE:
        p = np.array([state.x - spec.center[0], state.y - spec.center[1]])
        pd = np.array([state.x_dot, state.y_dot])
        q = np.array([h, 2.0 * p @ pd])
        lf = 2.0 * pd @ pd + 2.0 * p @ drift[:2]
        lg = 2.0 * p @ g[:2]
    elif spec.kind == ROLL_ANGLE:
        s = state.phi + spec.phi_G
        q = np.array([h, -2.0 * s * state.phi_dot])
        lf = -2.0 * state.phi_dot ** 2 - 2.0 * s * drift[2]
        lg = -2.0 * s * g[2]
    else:
        q = np.array([h])
        lf = -2.0 * state.phi_dot * drift[2]
        lg = -2.0 * state.phi_dot * g[2]
    degenerate = bool(np.all(np.abs(lg) < _DEGENERATE_TOL))
    return BarrierDerivatives(q, float(lf), np.asarray(lg, dtype=float), degenerate)


def assemble_constraint(spec: BarrierSpec, state: VehicleState, drift, g, variance=None
                        ) -> CbfConstraint:
    """``L_G L_F^(p-1) h u >= -gamma q - L_F^p h``."""
    d = barrier_derivatives(spec, state, drift, g, variance)
    rhs = -float(np.dot(spec.gamma, d.q)) - d.lf
    return CbfConstraint(d.lg, rhs, d.degenerate, spec)


def perturbation_bound(spec: BarrierSpec, state: VehicleState, margin) -> float:
    """Bound on ``|d h^(p-1)/d chi . delta_F|`` given the per-output error margin."""
    margin = np.asarray(margin, dtype=float)
    if spec.kind == OBSTACLE:
        p = math.hypot(state.x - spec.center[0], state.y - spec.center[1])
        return 2.0 * p * float(np.linalg.norm(margin[:2]))
    if spec.kind == ROLL_ANGLE:
        return 2.0 * abs(state.phi + spec.phi_G) * float(margin[2])
    return 2.0 * abs(state.phi_dot) * float(margin[2])


def companion(gamma) -> np.ndarray:
    """Closed-loop matrix ``A - B gamma`` of the ``q`` chain."""
    p = len(gamma)
    M = np.zeros((p, p))
    M[:-1, 1:] = np.eye(p - 1)
    M[-1, :] = -np.asarray(gamma, dtype=float)
    return M


def h_delta_max_estimate(bounds, gamma, dt: float) -> float:
    """Largest response of the stable ``q`` chain to the perturbation-bound history.

    ``bounds`` is the per-sample bound on ``|u_delta|``, held over each ``dt``.
    """
    bounds = np.abs(np.asarray(bounds, dtype=float))
    if bounds.size == 0 or not np.any(bounds > 0):
        return 0.0
    M = companion(gamma)
    p = M.shape[0]
    B = np.zeros(p)
    B[-1] = 1.0
    Ad = linalg.expm(M * dt)
    Bd = np.linalg.solve(M, (Ad - np.eye(p)) @ B)
    z = np.zeros(p)
    peak = 0.0
    for b in bounds:
        z = Ad @ z + Bd * b
        peak = max(peak, abs(z[0]))
    return float(peak)


# --------------------------------------------------------------------------
# batched form used inside the MPC
# --------------------------------------------------------------------------

def constraint_margin(spec: BarrierSpec, states, accs, variance=None) -> np.ndarray:
    """``h^(p) + gamma q`` along predicted trajectories; ``>= 0`` means satisfied.

    Args:
        states: (..., 6) states ``[x, y, psi, v, phi, phi_dot]``.
        accs: (..., 3) accelerations under the applied input at those states.
    """
    states = np.asarray(states)
    accs = np.asarray(accs)
    shift = _variance_term(spec, variance)
    if spec.kind == OBSTACLE:
        px = states[..., 0] - spec.center[0]
        py = states[..., 1] - spec.center[1]
        v, psi = states[..., 3], states[..., 2]
        vx, vy = v * np.cos(psi), v * np.sin(psi)
        h = px * px + py * py - (spec.radius + spec.buffer) ** 2 - shift
        hd = 2.0 * (px * vx + py * vy)
        hdd = 2.0 * (vx * vx + vy * vy) + 2.0 * (px * accs[..., 0] + py * accs[..., 1])
        return hdd + spec.gamma[1] * hd + spec.gamma[0] * h
    phi, phid, phidd = states[..., 4], states[..., 5], accs[..., 2]
    if spec.kind == ROLL_ANGLE:
        s = phi + spec.phi_G
        h = (spec.phi_max + spec.phi_G) ** 2 - s * s - shift
        hd = -2.0 * s * phid
        hdd = -2.0 * phid * phid - 2.0 * s * phidd
        return hdd + spec.gamma[1] * hd + spec.gamma[0] * h
    h = spec.phi_dot_max ** 2 - phid * phid
    return -2.0 * phid * phidd + spec.gamma[0] * h


def project_halfplanes(u_nom, constraints, weights=None):
    """Weighted-Euclidean projection of ``u_nom`` onto the intersection of half-planes.

    Degenerate rows are dropped with a warning. Solved exactly by the dense QP.
    Returns ``(u, softened)``.
    """
    from .qp import solve_qp

    u_nom = np.asarray(u_nom, dtype=float)
    n = u_nom.size
    Wm = np.diag(np.ones(n) if weights is None else np.asarray(weights, dtype=float))
    rows, rhs = [], []
    for c in constraints:
        if c.degenerate:
            if c.rhs > 0:
                warnings.warn("dropping degenerate barrier constraint", DegenerateBarrierWarning)
            continue
        rows.append(c.coeff_u)
        rhs.append(c.rhs)
    if not rows:
        return u_nom.copy(), False
    res = solve_qp(Wm, -Wm @ u_nom, np.array(rows), np.array(rhs), soft_penalty=1e4)
    return res.x, res.softened

"""Safe ski-stunt controller: nominal planar law, CBF-constrained MPC, BEM and roll regulation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .cbf import (BarrierSpec, CbfConstraint, assemble_constraint, barrier_value,
                  constraint_margin)
from .gp import GpModel
from .qp import solve_qp
from .vehicle import (VehicleParams, VehicleState, drift_and_input, planar_input_matrix_inv,
                      roll_terms, roll_terms_dphi)

log = logging.getLogger(__name__)

_V_MIN = 0.05
_G_PHI_MIN = 0.1


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MpcConfig:
    """Horizon, weights and limits of the safety MPC.

    ``W1`` weighs ``[x, y, phi, x_dot, y_dot, phi_dot]`` errors and ``W2`` the
    deviation from the nominal input. Zero state weights are allowed so the
    single-step problem can reduce to a pure projection.
    """

    H: int = 5
    dt: float = 0.02
    W1: tuple = (20.0, 20.0, 20.0, 10.0, 10.0, 10.0)
    W2: tuple = (5.0, 5.0)
    sqp_max_iter: int = 30
    sqp_tol: float = 1e-6
    u_v_max: float = 5.0
    u_psi_max: float = 3.0
    steer_max: float = math.radians(35.0)
    trust_fraction: float = 0.5
    soft_penalty: float = 1e4
    hold_speed: bool = False
    slew_rate: float | None = None  # rad/s^2 on u_psi, relative to the previous applied u_s
    roll_floor: bool = False  # predict with the four-wheel contact floor

    def __post_init__(self):
        if self.H < 1 or self.dt <= 0:
            raise ValueError("need H >= 1 and dt > 0")
        if len(self.W1) != 6 or len(self.W2) != 2:
            raise ValueError("W1 has 6 entries, W2 has 2")
        if any(w < 0 for w in self.W1) or any(w <= 0 for w in self.W2):
            raise ValueError("W1 must be non-negative and W2 positive")
        if self.sqp_max_iter < 1 or self.sqp_tol <= 0:
            raise ValueError("bad SQP settings")
        if min(self.u_v_max, self.u_psi_max, self.steer_max, self.trust_fraction) <= 0:
            raise ValueError("bounds must be positive")
        if self.slew_rate is not None and self.slew_rate <= 0:
            raise ValueError("slew_rate must be positive")


@dataclass(frozen=True)
class BemConfig:
    """Gradient descent on ``Gamma``; ``alpha`` is the first trial step of each Armijo search."""

    alpha: float = 0.05
    epsilon: float = 1e-8
    max_iter: int = 200
    armijo: float = 0.5  # rejects steps past the minimiser of a locally quadratic Gamma
    backtrack: float = 0.5

    def __post_init__(self):
        if self.alpha <= 0 or self.epsilon <= 0 or self.max_iter < 1:
            raise ValueError("alpha, epsilon and max_iter must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if not 0 < self.armijo < 1:
            raise ValueError("armijo constant must lie in (0, 1)")


@dataclass(frozen=True)
class RollGains:
    k_p: float = 35.0
    k_d: float = 20.0

    def __post_init__(self):
        if self.k_p <= 0 or self.k_d <= 0:
            raise ValueError("roll gains must be positive")


@dataclass(frozen=True)
class KickConfig:
    """Open-loop steering pulse that lifts the truck off the floor.

    The pulse holds ``steer`` until roll passes ``release_phi``.
    """

    steer: float = math.radians(30.0)
    release_phi: float = math.radians(-10.0)
    max_duration: float = 3.0


@dataclass(frozen=True)
class ControllerConfig:
    mpc: MpcConfig = field(default_factory=MpcConfig)
    bem: BemConfig = field(default_factory=BemConfig)
    roll: RollGains = field(default_factory=RollGains)
    pd_gains: tuple = (4.0, 4.0)
    deriv_tau: float = None
    reproject: str = "none"
    stunt_start: float = 0.0
    kick: KickConfig | None = None
    gp_feedforward: bool = False
    use_gp: bool = True

    def __post_init__(self):
        if self.reproject not in ("none", "roll", "all"):
            raise ValueError("reproject must be none, roll or all")

    @property
    def tau(self) -> float:
        return 3.0 * self.mpc.dt if self.deriv_tau is None else self.deriv_tau


# --------------------------------------------------------------------------
# references
# --------------------------------------------------------------------------

@dataclass
class ReferenceWindow:
    """Desired planar position, velocity and acceleration at ``k = 0..H``."""

    pos: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    speed: float = 0.0
    active: bool = True


class Reference:
    """Planar reference source. ``window`` returns ``H + 1`` samples from the current time."""

    def window(self, t: float, state: VehicleState, H: int, dt: float) -> ReferenceWindow:
        raise NotImplementedError

    def error(self, t: float, state: VehicleState) -> float:
        return 0.0


class NoReference(Reference):
    """Pure balancing: nominal input zero, planar state errors unweighted."""

    def window(self, t, state, H, dt):
        z = np.zeros((H + 1, 2))
        return ReferenceWindow(z, z.copy(), z.copy(), state.v, active=False)


class WaypointReference(Reference):
    """Straight line from ``start`` to ``goal`` followed at ``speed``.

    Samples start at the projection of the vehicle onto the line, so falling
    behind while detouring does not accumulate along-track error.
    """

    def __init__(self, start, goal, speed: float):
        self.start = np.asarray(start, dtype=float)
        self.goal = np.asarray(goal, dtype=float)
        d = self.goal - self.start
        self.length = float(np.hypot(*d))
        if self.length == 0:
            raise ValueError("start and goal coincide")
        self.dir = d / self.length
        self.speed = float(speed)

    def window(self, t, state, H, dt):
        p = np.array([state.x, state.y])
        s0 = float(np.clip((p - self.start) @ self.dir, 0.0, self.length))
        s = np.minimum(s0 + self.speed * dt * np.arange(H + 1), self.length)
        pos = self.start + s[:, None] * self.dir
        vel = np.where((s < self.length)[:, None], self.speed * self.dir, 0.0)
        return ReferenceWindow(pos, vel, np.zeros((H + 1, 2)), self.speed)

    def error(self, t, state):
        p = np.array([state.x, state.y]) - self.start
        return float(abs(p[0] * self.dir[1] - p[1] * self.dir[0]))


class GoalReference(Reference):
    """Pursuit of a fixed goal: the line is redrawn from the current position every step."""

    def __init__(self, goal, speed: float):
        self.goal = np.asarray(goal, dtype=float)
        self.speed = float(speed)

    def window(self, t, state, H, dt):
        p = np.array([state.x, state.y])
        d = self.goal - p
        dist = float(np.hypot(*d))
        u = d / dist if dist > 1e-9 else np.zeros(2)
        s = np.minimum(self.speed * dt * np.arange(H + 1), dist)
        pos = p + s[:, None] * u
        vel = np.where((s < dist)[:, None], self.speed * u, 0.0)
        return ReferenceWindow(pos, vel, np.zeros((H + 1, 2)), self.speed)

    def error(self, t, state):
        return float(np.hypot(self.goal[0] - state.x, self.goal[1] - state.y))


class LineReference(Reference):
    """Time-parametrised ``x_d = x0 + a t``, ``y_d = y0 + b t``."""

    def __init__(self, a: float, b: float, origin=(0.0, 0.0)):
        self.vel = np.array([a, b], dtype=float)
        self.origin = np.asarray(origin, dtype=float)

    def window(self, t, state, H, dt):
        tk = t + dt * np.arange(H + 1)
        pos = self.origin + tk[:, None] * self.vel
        vel = np.tile(self.vel, (H + 1, 1))
        return ReferenceWindow(pos, vel, np.zeros((H + 1, 2)), float(np.hypot(*self.vel)))

    def error(self, t, state):
        d = self.origin + t * self.vel - np.array([state.x, state.y])
        return float(np.hypot(*d))


class PathReference(LineReference):
    """The same line followed as a path by pursuing a point ``lookahead`` metres ahead
    of the vehicle's projection.

    Along-track lag is not penalised, so the error is the cross-track distance.
    """

    def __init__(self, a: float, b: float, origin=(0.0, 0.0), lookahead: float = 5.0):
        super().__init__(a, b, origin)
        if lookahead <= 0:
            raise ValueError("lookahead must be positive")
        self.lookahead = float(lookahead)
        self.speed = float(np.hypot(*self.vel))
        self.unit = self.vel / self.speed

    def window(self, t, state, H, dt):
        p = np.array([state.x, state.y])
        s0 = float((p - self.origin) @ self.unit)
        d = self.origin + (s0 + self.lookahead) * self.unit - p
        u = d / np.hypot(*d)
        pos = p + (self.speed * dt * np.arange(H + 1))[:, None] * u
        return ReferenceWindow(pos, np.tile(self.speed * u, (H + 1, 1)), np.zeros((H + 1, 2)),
                               self.speed)

    def error(self, t, state):
        d = np.array([state.x, state.y]) - self.origin
        return float(abs(d[0] * self.unit[1] - d[1] * self.unit[0]))


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

@dataclass
class MpcResult:
    u: np.ndarray
    sequence: np.ndarray
    iterations: int
    converged: bool
    softened: bool
    kkt: float
    active: list
    objective: float


@dataclass
class BemResult:
    phi_e: float
    converged: bool
    iterations: int
    gamma: float


@dataclass
class ControlOutput:
    u_nominal: np.ndarray
    u_safe: np.ndarray
    u_final: np.ndarray
    phi_e: float
    phi_e_dot: float
    phi_e_ddot: float
    gamma_resid: float
    phase: str
    mpc: MpcResult | None
    bem: BemResult | None
    flags: set = field(default_factory=set)
    cycle_ms: float = 0.0


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _gp_terms(gp: GpModel | None, state: VehicleState, u, params: VehicleParams):
    """GP mean and variance at the features of ``state`` under input ``u``."""
    if gp is None:
        return np.zeros(3), np.zeros(3)
    xi = kernels.features(state.array(), np.asarray(u, dtype=float), params.vector())
    mean, var = gp.predict(xi)
    return np.asarray(mean).reshape(3), np.asarray(var).reshape(3)


def psi_bound(state: VehicleState, cfg: MpcConfig, params: VehicleParams) -> float:
    """Yaw-rate magnitude allowed by the steering limit and the yaw-rate box."""
    c = abs(math.cos(state.phi + params.phi_G))
    steer_cap = abs(state.v) * math.tan(cfg.steer_max) / (params.l_1 * max(c, 1e-6))
    return min(cfg.u_psi_max, steer_cap)


def clip_input(u, state: VehicleState, cfg: MpcConfig, params: VehicleParams) -> np.ndarray:
    b = psi_bound(state, cfg, params)
    return np.array([float(np.clip(u[0], -cfg.u_v_max, cfg.u_v_max)),
                     float(np.clip(u[1], -b, b))])


def barrier_constraints(state: VehicleState, barriers, params: VehicleParams,
                        gp_mean=None, gp_var=None, hold_speed: bool = False) -> list[CbfConstraint]:
    """CBF half-planes in ``u`` at ``state`` for the learning-enhanced model."""
    f, g = drift_and_input(state, params)
    if gp_mean is not None:
        f = f + np.asarray(gp_mean)
    if hold_speed:
        g = g.copy()
        g[:2, 0] = 0.0
        c, s = math.cos(state.psi), math.sin(state.psi)
        f = f.copy()
        # speed servo cancels the along-track residual component
        along = c * f[0] + s * f[1]
        f[0] -= c * along
        f[1] -= s * along
    return [assemble_constraint(b, state, f, g, gp_var) for b in barriers]


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def nominal_control(state: VehicleState, ref_pos, ref_vel, ref_acc=(0.0, 0.0),
                    gains=(4.0, 4.0), ref_speed: float | None = None,
                    u_v_max: float = 5.0) -> np.ndarray:
    """PD on planar position mapped through the inverse planar input matrix."""
    kp, kd = gains
    r = np.array([state.x, state.y])
    rd = np.array([state.x_dot, state.y_dot])
    acc = np.asarray(ref_acc, float) + kd * (np.asarray(ref_vel, float) - rd) \
        + kp * (np.asarray(ref_pos, float) - r)
    if abs(state.v) < _V_MIN:
        target = float(np.hypot(*ref_vel)) if ref_speed is None else ref_speed
        return np.array([float(np.clip(kd * (target - state.v), -u_v_max, u_v_max)), 0.0])
    return planar_input_matrix_inv(state.v, state.psi) @ acc


def _mpc_weights(cfg: MpcConfig, ref: ReferenceWindow):
    w1 = np.array(cfg.W1, dtype=float)
    if cfg.hold_speed:
        w1[3:5] = 0.0
    if not ref.active:
        w1[[0, 1, 3, 4]] = 0.0
    return np.sqrt(w1), np.sqrt(np.array(cfg.W2, dtype=float))


class _MpcProblem:
    """Residuals and CBF margins of one MPC instance as functions of the input sequence."""

    def __init__(self, state, ref, gp, barriers, cfg, u_nom, params, gp_var, phi_ref,
                 u_prev=None):
        self.s0 = state.array()
        self.cfg = cfg
        self.H = cfg.H
        self.hold = cfg.hold_speed
        self.nu = 1 if self.hold else 2
        self.u_nom = np.asarray(u_nom, dtype=float)
        self.P = params.vector()
        self.barriers = list(barriers)
        self.gp_var = gp_var
        self.sw1, self.sw2 = _mpc_weights(cfg, ref)
        if gp is not None:
            self.mode, self.gp_arrays = kernels.RES_GP, gp.arrays()
        else:
            self.mode, self.gp_arrays = kernels.RES_NONE, None
        self.Uf = np.tile(self.u_nom, (self.H, 1))
        ref_chi = np.zeros((self.H, 6))
        ref_chi[:, 0:2] = ref.pos[1:self.H + 1]
        ref_chi[:, 2] = phi_ref
        ref_chi[:, 3:5] = ref.vel[1:self.H + 1]
        self.ref_chi = ref_chi
        bv = psi_bound(state, cfg, params)
        lo_psi, hi_psi = np.full(self.H, -bv), np.full(self.H, bv)
        if cfg.slew_rate is not None and u_prev is not None:
            # cumulative slew band around the last applied yaw-rate command
            c0 = float(np.clip(u_prev, -bv, bv))
            reach = cfg.slew_rate * cfg.dt * np.arange(1, self.H + 1)
            lo_psi = np.maximum(lo_psi, c0 - reach)
            hi_psi = np.minimum(hi_psi, c0 + reach)
        self.span = np.full(self.H, 2 * bv) if self.hold else np.tile([2 * cfg.u_v_max, 2 * bv], self.H)
        if self.hold:
            self.lb, self.ub = lo_psi, hi_psi
        else:
            self.lb = np.column_stack([np.full(self.H, -cfg.u_v_max), lo_psi]).ravel()
            self.ub = np.column_stack([np.full(self.H, cfg.u_v_max), hi_psi]).ravel()

    def full_inputs(self, Z):
        """(B, n_z) decision vectors to (B, H, 2) input sequences."""
        Z = np.atleast_2d(Z)
        if self.hold:
            U = np.zeros((Z.shape[0], self.H, 2))
            U[:, :, 1] = Z
            return U
        return Z.reshape(Z.shape[0], self.H, 2)

    def evaluate(self, Z):
        """Stacked residuals (B, n_r) and CBF margins (B, n_c) for a batch of sequences."""
        U = self.full_inputs(Z)
        states, accs = kernels.rollout(self.s0, U, self.Uf, self.cfg.dt, self.P, self.mode,
                                       self.hold, self.cfg.roll_floor, self.gp_arrays)
        st = states[:, 1:]
        chi = np.stack([st[..., 0], st[..., 1], st[..., 4],
                        st[..., 3] * np.cos(st[..., 2]), st[..., 3] * np.sin(st[..., 2]),
                        st[..., 5]], axis=-1)
        r_state = ((chi - self.ref_chi) * self.sw1).reshape(Z.shape[0], -1)
        if self.hold:
            r_u = (U[:, :, 1] - self.u_nom[1]) * self.sw2[1]
        else:
            r_u = ((U - self.u_nom) * self.sw2).reshape(Z.shape[0], -1)
        r = np.concatenate([r_state, r_u], axis=1)
        if self.barriers:
            c = np.concatenate([constraint_margin(b, states[:, :self.H], accs, self.gp_var)
                                for b in self.barriers], axis=1)
        else:
            c = np.zeros((Z.shape[0], 0))
        return r, c

    def linearise(self, z):
        n = z.size
        eps = 1e-6 * np.maximum(1.0, np.abs(z))
        Z = np.tile(z, (n + 1, 1))
        Z[1:] += np.diag(eps)
        r, c = self.evaluate(Z)
        Jr = ((r[1:] - r[0]) / eps[:, None]).T
        Jc = ((c[1:] - c[0]) / eps[:, None]).T
        return r[0], c[0], Jr, Jc


def _merit(r, c, mu):
    return 0.5 * float(r @ r) + mu * float(np.sum(np.maximum(-c, 0.0)))


def safe_mpc(state: VehicleState, ref: ReferenceWindow, gp: GpModel | None, barriers,
             cfg: MpcConfig, u_nom, params: VehicleParams | None = None, warm=None,
             gp_var=None, phi_ref: float = 0.0, u_prev: float | None = None) -> MpcResult:
    """Solve the CBF-constrained MPC by SQP and return the first input.

    Gauss-Newton Hessian, forward-difference Jacobians from one batched rollout,
    trust region of ``trust_fraction`` times the input range and an L1 merit
    line search. Infeasible subproblems are softened.
    """
    params = params or VehicleParams()
    prob = _MpcProblem(state, ref, gp, barriers, cfg, u_nom, params, gp_var, phi_ref, u_prev)
    if warm is None:
        z = np.tile(prob.u_nom[1:] if prob.hold else prob.u_nom, cfg.H)
    else:
        z = np.asarray(warm, dtype=float).ravel().copy()
    z = np.clip(z, prob.lb, prob.ub)
    n = z.size
    trust = cfg.trust_fraction * prob.span
    mu = cfg.soft_penalty
    r, c, Jr, Jc = prob.linearise(z)
    best = (_merit(r, c, mu), z.copy())
    softened = False
    converged = False
    kkt = math.inf
    active: list = []
    it = 0
    for it in range(1, cfg.sqp_max_iter + 1):
        Hs = Jr.T @ Jr + 1e-9 * np.eye(n)
        gvec = Jr.T @ r
        lo = np.maximum(prob.lb - z, -trust)
        hi = np.minimum(prob.ub - z, trust)
        C = np.vstack([Jc, np.eye(n), -np.eye(n)])
        b = np.concatenate([-c, lo, -hi])
        soft = np.r_[np.ones(len(c), bool), np.zeros(2 * n, bool)]
        qp = solve_qp(Hs, gvec, C, b, soft_rows=soft, soft_penalty=cfg.soft_penalty)
        softened = qp.softened
        dz = qp.x
        lam = qp.multipliers
        kkt = float(np.max(np.abs(gvec + Hs @ dz - C.T @ lam))) if n else 0.0
        m0 = _merit(r, c, mu)
        lin_decrease = gvec @ dz + 0.5 * dz @ Hs @ dz + mu * (np.sum(np.maximum(-c - Jc @ dz, 0))
                                                            - np.sum(np.maximum(-c, 0)))
        step = 1.0
        while True:
            z_new = np.clip(z + step * dz, prob.lb, prob.ub)
            r_new, c_new = (a[0] for a in prob.evaluate(z_new[None, :]))
            m_new = _merit(r_new, c_new, mu)
            if m_new <= m0 + 1e-4 * step * min(lin_decrease, 0.0) or step < 1e-3:
                break
            step *= 0.5
        z = z_new
        active = [i for i in qp.active if i < len(c)]
        if m_new < best[0]:
            best = (m_new, z.copy())
        if np.max(np.abs(step * dz)) < cfg.sqp_tol:
            converged = True
            r, c = r_new, c_new
            break
        r, c, Jr, Jc = prob.linearise(z)
    if not converged:
        z = best[1]
    U = prob.full_inputs(z)[0]
    rr, _ = prob.evaluate(z[None, :])
    return MpcResult(U[0].copy(), U, it, converged, softened, kkt, active,
                     0.5 * float(rr[0] @ rr[0]))


def bem_residual(phi: float, state: VehicleState, u_psi: float, gp: GpModel | None,
                 params: VehicleParams, u_v: float = 0.0):
    """Roll acceleration at rest ``f_phi + f_mu_phi + g_phi u_psi`` and its derivative in ``phi``."""
    st = replace(state, phi=phi, phi_dot=0.0)
    f_phi, g_phi = roll_terms(st, params)
    df, dg = roll_terms_dphi(st, params)
    r = f_phi + g_phi * u_psi
    dr = df + dg * u_psi
    if gp is not None:
        P = params.vector()
        xi = kernels.features(st.array(), np.array([u_v, u_psi]), P)[0]
        xi[6] = 0.0
        J = gp.predict_mean_grad(xi)
        r += float(gp.predict_mean(xi)[2])
        # features depending on phi: phi itself and the steering angle
        v = st.v
        if abs(v) > 1e-6:
            a = u_psi * params.l_1 / v
            pr = phi + params.phi_G
            dsteer = -a * math.sin(pr) / (1.0 + (a * math.cos(pr)) ** 2)
        else:
            dsteer = 0.0
        dr += J[2, 4] + J[2, 7] * dsteer
    return r, dr


def estimate_bem(state: VehicleState, u_psi: float, gp: GpModel | None,
                 cfg: BemConfig | None = None, params: VehicleParams | None = None,
                 warm: float | None = None, u_v: float = 0.0) -> BemResult:
    """Balance equilibrium roll angle by gradient descent on ``Gamma = r(phi)^2``.

    The step starts at ``alpha`` and is halved until the Armijo condition holds;
    the accepted step seeds the next trial (doubled) so well-scaled problems
    do not pay for repeated backtracking.
    """
    cfg = cfg or BemConfig()
    params = params or VehicleParams()
    phi = float(state.phi if warm is None else warm)
    lim = math.pi / 2 - params.phi_G - 1e-3
    r, dr = bem_residual(phi, state, u_psi, gp, params, u_v)
    gam = r * r
    alpha = cfg.alpha
    it = 0
    while gam > cfg.epsilon and it < cfg.max_iter:
        it += 1
        grad = 2.0 * r * dr
        if grad == 0.0:
            break
        step = min(alpha * 2.0, cfg.alpha)
        while True:
            cand = min(max(phi - step * grad, -lim), lim)
            r_c, dr_c = bem_residual(cand, state, u_psi, gp, params, u_v)
            if r_c * r_c <= gam - cfg.armijo * step * grad * grad or step < 1e-12:
                break
            step *= cfg.backtrack
        alpha = step
        if cand == phi:
            break
        phi, r, dr = cand, r_c, dr_c
        gam = r * r
    return BemResult(phi, gam <= cfg.epsilon, it, gam)


def roll_regulation(state: VehicleState, phi_e: float, phi_e_dot: float, phi_e_ddot: float,
                    gains: RollGains, params: VehicleParams, f_mu_phi: float = 0.0) -> float:
    """Feedback-linearising steering command driving roll onto the BEM.

    Raises ``ZeroDivisionError`` when the roll input gain is too small to invert.
    """
    f_phi, g_phi = roll_terms(state, params)
    if abs(g_phi) < _G_PHI_MIN:
        raise ZeroDivisionError(f"roll input gain {g_phi:.3g} below {_G_PHI_MIN}")
    e = state.phi - phi_e
    ed = state.phi_dot - phi_e_dot
    return (-f_phi - f_mu_phi + phi_e_ddot - gains.k_p * e - gains.k_d * ed) / g_phi


def project_input(u, state: VehicleState, barriers, params: VehicleParams, cfg: MpcConfig,
                  gp_mean=None, gp_var=None, roll_only: bool = True):
    """Minimal change of ``u`` so the current CBF half-planes hold; speed input kept if held.

    Returns ``(u, softened)``.
    """
    specs = [b for b in barriers if b.is_roll or not roll_only]
    u = np.asarray(u, dtype=float)
    if not specs:
        return u.copy(), False
    cons = [k for k in barrier_constraints(state, specs, params, gp_mean, gp_var, cfg.hold_speed)
            if not k.degenerate]
    if not cons:
        return u.copy(), False
    bv = psi_bound(state, cfg, params)
    free_v = not (cfg.hold_speed or roll_only)
    if free_v:
        rows = [k.coeff_u for k in cons] + [np.eye(2)[i] * s for i in range(2) for s in (1, -1)]
        rhs = [k.rhs for k in cons] + [-cfg.u_v_max, -cfg.u_v_max, -bv, -bv]
        res = solve_qp(np.eye(2), -u, np.array(rows), np.array(rhs),
                       soft_rows=np.r_[np.ones(len(cons), bool), np.zeros(4, bool)])
        return res.x, res.softened
    # only the yaw channel moves
    rows = [[k.coeff_u[1]] for k in cons] + [[1.0], [-1.0]]
    rhs = [k.rhs - k.coeff_u[0] * u[0] for k in cons] + [-bv, -bv]
    res = solve_qp(np.eye(1), np.array([-u[1]]), np.array(rows), np.array(rhs),
                   soft_rows=np.r_[np.ones(len(cons), bool), np.zeros(2, bool)])
    return np.array([u[0], res.x[0]]), res.softened


# --------------------------------------------------------------------------
# stateful loop
# --------------------------------------------------------------------------

class Controller:
    """One instance per run: keeps MPC warm starts, the BEM estimate and its derivative filters."""

    def __init__(self, cfg: ControllerConfig, barriers, reference: Reference,
                 gp: GpModel | None = None, params: VehicleParams | None = None,
                 clock=time.perf_counter):
        self.cfg = cfg
        self.barriers = list(barriers)
        self.reference = reference
        self.gp = gp if cfg.use_gp else None
        self.params = params or VehicleParams()
        self.clock = clock
        self.reset()

    def reset(self):
        self._warm = None
        self._phi_e = None
        self._phi_e_dot = 0.0
        self._phi_e_ddot = 0.0
        self._u_roll_prev = 0.0
        self._u_s_prev = None
        self._kick_done = self.cfg.kick is None
        self._kick_t0 = None

    def _update_bem_derivs(self, phi_e: float):
        dt, tau = self.cfg.mpc.dt, self.cfg.tau
        a = dt / (tau + dt)
        if self._phi_e is None:
            self._phi_e = phi_e
            return
        raw = (phi_e - self._phi_e) / dt
        new_dot = self._phi_e_dot + a * (raw - self._phi_e_dot)
        raw2 = (new_dot - self._phi_e_dot) / dt
        self._phi_e_ddot += a * (raw2 - self._phi_e_ddot)
        self._phi_e_dot = new_dot
        self._phi_e = phi_e

    def step(self, t: float, state: VehicleState) -> ControlOutput:
        t0 = self.clock()
        cfg, P = self.cfg, self.params
        mcfg = cfg.mpc
        flags: set = set()
        ref = self.reference.window(t, state, mcfg.H, mcfg.dt)
        if ref.active:
            u_nom = nominal_control(state, ref.pos[0], ref.vel[0], ref.acc[0], cfg.pd_gains,
                                    ref.speed, mcfg.u_v_max)
            if cfg.gp_feedforward and self.gp is not None:
                # cancel the learned planar residual, evaluated at the uncompensated input
                mu, _ = _gp_terms(self.gp, state, u_nom, P)
                u_nom = nominal_control(state, ref.pos[0], ref.vel[0], ref.acc[0] - mu[:2],
                                        cfg.pd_gains, ref.speed, mcfg.u_v_max)
        else:
            u_nom = np.zeros(2)
        if mcfg.hold_speed:
            u_nom[0] = 0.0
        u_nom = clip_input(u_nom, state, mcfg, P)
        gp_mean, gp_var = _gp_terms(self.gp, state, u_nom, P)

        warm = None
        if self._warm is not None:
            warm = np.concatenate([self._warm[1:], self._warm[-1:]])
        mpc = safe_mpc(state, ref, self.gp, self.barriers, mcfg, u_nom, P,
                       warm=None if warm is None else warm.ravel(), gp_var=gp_var,
                       phi_ref=0.0,
                       u_prev=u_nom[1] if self._u_s_prev is None else self._u_s_prev)
        self._warm = mpc.sequence[:, 1] if mcfg.hold_speed else mpc.sequence
        u_safe = mpc.u.copy()
        self._u_s_prev = u_safe[1]
        if mpc.softened:
            flags.add("softened")
        if not mpc.converged:
            flags.add("sqp_not_converged")

        bem = estimate_bem(state, u_safe[1], self.gp, cfg.bem, P,
                           warm=self._phi_e, u_v=u_safe[0])
        if bem.converged:
            phi_e = bem.phi_e
        else:
            flags.add("bem_not_converged")
            phi_e = self._phi_e if self._phi_e is not None else bem.phi_e
        self._update_bem_derivs(phi_e)
        gamma_resid = bem_residual(phi_e, state, u_safe[1], self.gp, P, u_safe[0])[0] ** 2

        if t < cfg.stunt_start:
            phase = "four_wheel"
            u_psi = u_safe[1]
        elif not self._kick_done:
            phase = "kick"
            if self._kick_t0 is None:
                self._kick_t0 = t
            k = cfg.kick
            c = math.cos(state.phi + P.phi_G)
            u_psi = state.v * math.tan(k.steer) / (P.l_1 * max(abs(c), 1e-6))
            if state.phi >= k.release_phi or t - self._kick_t0 >= k.max_duration:
                self._kick_done = True
        else:
            phase = "stunt"
            try:
                u_psi = roll_regulation(state, phi_e, self._phi_e_dot, self._phi_e_ddot,
                                        cfg.roll, P, f_mu_phi=gp_mean[2])
            except ZeroDivisionError:
                flags.add("singular_balance")
                u_psi = self._u_roll_prev
        u_final = np.array([u_safe[0], u_psi])
        if cfg.reproject != "none" and phase != "four_wheel":
            u_final, soft = project_input(u_final, state, self.barriers, P, mcfg,
                                          gp_mean, gp_var, roll_only=cfg.reproject == "roll")
            if soft:
                flags.add("reprojection_softened")
        u_final = clip_input(u_final, state, mcfg, P)
        if mcfg.hold_speed:
            u_final[0] = 0.0
        self._u_roll_prev = u_final[1]
        return ControlOutput(u_nom, u_safe, u_final, phi_e, self._phi_e_dot, self._phi_e_ddot,
                             gamma_resid, phase, mpc, bem, flags,
                             (self.clock() - t0) * 1e3)


def control_step(controller: Controller, t: float, state: VehicleState) -> ControlOutput:
    return controller.step(t, state)


def barrier_values(state: VehicleState, barriers, gp_var=None) -> list[float]:
    return [barrier_value(b, state, gp_var) for b in barriers]

"""Hot numeric kernels with numba and pure-numpy implementations.

Every public kernel exists twice: a loop-based ``*_nb`` version compiled with
numba and a vectorised ``*_np`` version. The module-level names (``gp_mean``,
``rollout``...) are bound to one of them according to
:data:`skistunt._accel.BACKEND`.

State layout used throughout: ``s = [x, y, psi, v, phi, phi_dot]``.
Parameter vector: ``P = [m, J_t, l_1, l_G, phi_G, g]``.
Feature layout (9): ``[x_dot, y_dot, x_ddot, y_ddot, phi, phi_dot, phi_ddot, steer, v]``.
"""
import math

import numpy as np

from ._accel import BACKEND, njit

RES_NONE = 0
RES_SYNTH = 1
RES_GP = 2
_RES_GP_HELD = 3

N_STATE = 6
N_FEAT = 9
_V_EPS = 1e-6


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

@njit
def _steer_nb(v, upsi, phi_r, l1):
    if abs(v) < _V_EPS:
        return 0.0
    return math.atan(upsi * l1 * math.cos(phi_r) / v)


@njit
def _features_nb(s, uv, upsi, P, out):
    psi = s[2]
    v = s[3]
    phi = s[4]
    c = math.cos(psi)
    sn = math.sin(psi)
    b = P[0] * P[3] / P[1]
    out[0] = v * c
    out[1] = v * sn
    out[2] = c * uv - v * sn * upsi
    out[3] = sn * uv + v * c * upsi
    out[4] = phi
    out[5] = s[5]
    out[6] = b * (P[5] * math.sin(phi) + v * math.cos(phi) * upsi)
    out[7] = _steer_nb(v, upsi, phi + P[4], P[2])
    out[8] = v


@njit
def _gp_mean_point_nb(xq, X, W, sf2, alpha, out):
    D = W.shape[0]
    N = X.shape[0]
    F = X.shape[1]
    q = np.empty(D)
    for j in range(D):
        out[j] = 0.0
    for i in range(N):
        for j in range(D):
            q[j] = 0.0
        for k in range(F):
            d = xq[k] - X[i, k]
            d2 = d * d
            for j in range(D):
                q[j] += W[j, k] * d2
        for j in range(D):
            out[j] += alpha[j, i] * math.exp(-0.5 * q[j])
    for j in range(D):
        out[j] *= sf2[j]


@njit
def gp_mean_nb(Xq, X, W, sf2, alpha):
    M = Xq.shape[0]
    out = np.empty((M, W.shape[0]))
    for r in range(M):
        _gp_mean_point_nb(Xq[r], X, W, sf2, alpha, out[r])
    return out


@njit
def gp_mean_grad_nb(xq, X, W, sf2, alpha):
    D = W.shape[0]
    N = X.shape[0]
    F = X.shape[1]
    grad = np.zeros((D, F))
    d = np.empty(F)
    q = np.empty(D)
    for i in range(N):
        for j in range(D):
            q[j] = 0.0
        for k in range(F):
            d[k] = xq[k] - X[i, k]
            for j in range(D):
                q[j] += W[j, k] * d[k] * d[k]
        for j in range(D):
            a = alpha[j, i] * math.exp(-0.5 * q[j])
            for k in range(F):
                grad[j, k] -= a * W[j, k] * d[k]
    for j in range(D):
        for k in range(F):
            grad[j, k] *= sf2[j]
    return grad


@njit
def _deriv_nb(s, uv, upsi, P, mode, hold, X, W, sf2, alpha, ufv, ufpsi,
              feat, mu, out, acc):
    psi = s[2]
    v = s[3]
    phi = s[4]
    phid = s[5]
    c = math.cos(psi)
    sn = math.sin(psi)
    m = P[0]
    Jt = P[1]
    lG = P[3]
    g = P[5]
    fphi = m * g * lG * math.sin(phi) / Jt
    gphi = m * v * lG * math.cos(phi) / Jt
    rx = 0.0
    ry = 0.0
    rphi = 0.0
    if mode == 1:
        rx = 0.5 * v * c * c * sn
        ry = 0.5 * v * c * sn
        rphi = 0.25 * v * v * math.sin(phi) - 0.25 * phid
    elif mode == 2:
        _features_nb(s, ufv, ufpsi, P, feat)
        _gp_mean_point_nb(feat, X, W, sf2, alpha, mu)
        rx = mu[0]
        ry = mu[1]
        rphi = mu[2]
    elif mode == _RES_GP_HELD:
        rx = mu[0]
        ry = mu[1]
        rphi = mu[2]
    if hold:
        vdot = 0.0
    else:
        vdot = uv + c * rx + sn * ry
    if abs(v) > _V_EPS:
        psidot = upsi + (-sn * rx + c * ry) / v
    else:
        psidot = upsi
    phidd = fphi + gphi * upsi + rphi
    out[0] = v * c
    out[1] = v * sn
    out[2] = psidot
    out[3] = vdot
    out[4] = phid
    out[5] = phidd
    acc[0] = c * vdot - v * sn * psidot
    acc[1] = sn * vdot + v * c * psidot
    acc[2] = phidd


@njit
def rollout_nb(s0, U, Uf, dt, P, mode, hold, floor, X, W, sf2, alpha):
    B = U.shape[0]
    H = U.shape[1]
    states = np.empty((B, H + 1, N_STATE))
    accs = np.empty((B, H, 3))
    feat = np.empty(N_FEAT)
    mu = np.empty(3)
    k1 = np.empty(N_STATE)
    k2 = np.empty(N_STATE)
    k3 = np.empty(N_STATE)
    k4 = np.empty(N_STATE)
    tmp = np.empty(N_STATE)
    a = np.empty(3)
    junk = np.empty(3)
    floor_phi = -P[4]
    # one GP evaluation per step, held over the RK4 stages
    later = _RES_GP_HELD if mode == 2 else mode
    for b in range(B):
        s = s0.copy()
        for n in range(N_STATE):
            states[b, 0, n] = s[n]
        for k in range(H):
            uv = U[b, k, 0]
            up = U[b, k, 1]
            fv = Uf[k, 0]
            fp = Uf[k, 1]
            _deriv_nb(s, uv, up, P, mode, hold, X, W, sf2, alpha, fv, fp, feat, mu, k1, a)
            for n in range(3):
                accs[b, k, n] = a[n]
            for n in range(N_STATE):
                tmp[n] = s[n] + 0.5 * dt * k1[n]
            _deriv_nb(tmp, uv, up, P, later, hold, X, W, sf2, alpha, fv, fp, feat, mu, k2, junk)
            for n in range(N_STATE):
                tmp[n] = s[n] + 0.5 * dt * k2[n]
            _deriv_nb(tmp, uv, up, P, later, hold, X, W, sf2, alpha, fv, fp, feat, mu, k3, junk)
            for n in range(N_STATE):
                tmp[n] = s[n] + dt * k3[n]
            _deriv_nb(tmp, uv, up, P, later, hold, X, W, sf2, alpha, fv, fp, feat, mu, k4, junk)
            for n in range(N_STATE):
                s[n] = s[n] + dt / 6.0 * (k1[n] + 2.0 * k2[n] + 2.0 * k3[n] + k4[n])
            if floor and s[4] < floor_phi:
                s[4] = floor_phi
                if s[5] < 0.0:
                    s[5] = 0.0
            for n in range(N_STATE):
                states[b, k + 1, n] = s[n]
    return states, accs


# --------------------------------------------------------------------------
# numpy kernels
# --------------------------------------------------------------------------

_CHUNK = 256


def _steer_np(v, upsi, phi_r, l1):
    v = np.asarray(v, dtype=float)
    safe = np.where(np.abs(v) < _V_EPS, 1.0, v)
    return np.where(np.abs(v) < _V_EPS, 0.0, np.arctan(upsi * l1 * np.cos(phi_r) / safe))


def _features_np(s, uv, upsi, P):
    psi, v, phi = s[:, 2], s[:, 3], s[:, 4]
    c, sn = np.cos(psi), np.sin(psi)
    b = P[0] * P[3] / P[1]
    return np.stack([
        v * c,
        v * sn,
        c * uv - v * sn * upsi,
        sn * uv + v * c * upsi,
        phi,
        s[:, 5],
        b * (P[5] * np.sin(phi) + v * np.cos(phi) * upsi),
        _steer_np(v, upsi, phi + P[4], P[2]),
        v,
    ], axis=1)


def gp_mean_np(Xq, X, W, sf2, alpha):
    Xq = np.atleast_2d(Xq)
    out = np.empty((Xq.shape[0], W.shape[0]))
    for start in range(0, Xq.shape[0], _CHUNK):
        d2 = (Xq[start:start + _CHUNK, None, :] - X[None, :, :]) ** 2
        q = np.einsum("mnf,df->mdn", d2, W)
        out[start:start + _CHUNK] = np.einsum("mdn,dn->md", np.exp(-0.5 * q), alpha) * sf2
    return out


def gp_mean_grad_np(xq, X, W, sf2, alpha):
    d = xq[None, :] - X
    e = np.exp(-0.5 * (d ** 2) @ W.T)  # (N, D)
    a = alpha.T * e  # (N, D)
    return -sf2[:, None] * W * (a.T @ d)


def _deriv_np(s, u, P, mode, hold, X, W, sf2, alpha, uf, held=None):
    psi, v, phi, phid = s[:, 2], s[:, 3], s[:, 4], s[:, 5]
    c, sn = np.cos(psi), np.sin(psi)
    m, Jt, _, lG, _, g = P
    fphi = m * g * lG * np.sin(phi) / Jt
    gphi = m * v * lG * np.cos(phi) / Jt
    if mode == RES_SYNTH:
        rx = 0.5 * v * c * c * sn
        ry = 0.5 * v * c * sn
        rphi = 0.25 * v * v * np.sin(phi) - 0.25 * phid
    elif mode == RES_GP:
        feat = _features_np(s, uf[0], uf[1], P)
        mu = gp_mean_np(feat, X, W, sf2, alpha)
        rx, ry, rphi = mu[:, 0], mu[:, 1], mu[:, 2]
    elif mode == _RES_GP_HELD:
        rx, ry, rphi = held[:, 0], held[:, 1], held[:, 2]
    else:
        rx = ry = rphi = np.zeros_like(v)
    upsi = u[:, 1]
    vdot = np.zeros_like(v) if hold else u[:, 0] + c * rx + sn * ry
    safe_v = np.where(np.abs(v) > _V_EPS, v, 1.0)
    psidot = upsi + np.where(np.abs(v) > _V_EPS, (-sn * rx + c * ry) / safe_v, 0.0)
    phidd = fphi + gphi * upsi + rphi
    ds = np.stack([v * c, v * sn, psidot, vdot, phid, phidd], axis=1)
    acc = np.stack([c * vdot - v * sn * psidot, sn * vdot + v * c * psidot, phidd], axis=1)
    return ds, acc


def rollout_np(s0, U, Uf, dt, P, mode, hold, floor, X, W, sf2, alpha):
    B, H, _ = U.shape
    states = np.empty((B, H + 1, N_STATE))
    accs = np.empty((B, H, 3))
    s = np.tile(np.asarray(s0, dtype=float), (B, 1))
    states[:, 0] = s
    floor_phi = -P[4]
    for k in range(H):
        u = U[:, k, :]
        uf = Uf[k]
        held = None
        if mode == RES_GP:
            # one GP evaluation per step, held over the RK4 stages
            held = gp_mean_np(_features_np(s, uf[0], uf[1], P), X, W, sf2, alpha)
            m = _RES_GP_HELD
        else:
            m = mode
        k1, accs[:, k] = _deriv_np(s, u, P, m, hold, X, W, sf2, alpha, uf, held)
        k2, _ = _deriv_np(s + 0.5 * dt * k1, u, P, m, hold, X, W, sf2, alpha, uf, held)
        k3, _ = _deriv_np(s + 0.5 * dt * k2, u, P, m, hold, X, W, sf2, alpha, uf, held)
        k4, _ = _deriv_np(s + dt * k3, u, P, m, hold, X, W, sf2, alpha, uf, held)
        s = s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if floor:
            low = s[:, 4] < floor_phi
            s[low, 4] = floor_phi
            s[low, 5] = np.maximum(s[low, 5], 0.0)
        states[:, k + 1] = s
    return states, accs


# --------------------------------------------------------------------------
# backend binding
# --------------------------------------------------------------------------

if BACKEND == "numba":
    gp_mean = gp_mean_nb
    gp_mean_grad = gp_mean_grad_nb
    _rollout_impl = rollout_nb
else:
    gp_mean = gp_mean_np
    gp_mean_grad = gp_mean_grad_np
    _rollout_impl = rollout_np

_EMPTY_X = np.zeros((1, N_FEAT))
_EMPTY_W = np.zeros((3, N_FEAT))
_EMPTY_SF = np.zeros(3)
_EMPTY_A = np.zeros((3, 1))


def rollout(s0, U, Uf, dt, P, mode=RES_NONE, hold=False, floor=False, gp_arrays=None):
    """Integrate a batch of input sequences with RK4.

    Args:
        s0: initial state, shape (6,).
        U: inputs, shape (B, H, 2) with columns ``[u_v, u_psi]``.
        Uf: inputs used to build GP features at each step, shape (H, 2).
        dt: step length.
        P: parameter vector.
        mode: residual model, one of ``RES_NONE``, ``RES_SYNTH``, ``RES_GP``.
        hold: speed held constant (speed servo).
        floor: clamp roll at ``-phi_G`` (four-wheel contact).
        gp_arrays: ``(X, W, sf2, alpha)`` when ``mode == RES_GP``.

    Returns:
        ``states`` of shape (B, H+1, 6) and accelerations ``[x_ddot, y_ddot, phi_ddot]``
        at the start of each step, shape (B, H, 3).
    """
    if gp_arrays is None:
        if mode == RES_GP:
            raise ValueError("GP residual mode requires gp_arrays")
        X, W, sf2, alpha = _EMPTY_X, _EMPTY_W, _EMPTY_SF, _EMPTY_A
    else:
        X, W, sf2, alpha = gp_arrays
    return _rollout_impl(
        np.ascontiguousarray(s0, dtype=np.float64),
        np.ascontiguousarray(U, dtype=np.float64),
        np.ascontiguousarray(Uf, dtype=np.float64),
        float(dt), np.ascontiguousarray(P, dtype=np.float64),
        int(mode), bool(hold), bool(floor), X, W, sf2, alpha,
    )


def features(s, u, P):
    """Feature vectors for a batch of states ``s`` (M, 6) and inputs ``u`` (M, 2)."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    return _features_np(s, u[:, 0], u[:, 1], np.asarray(P, dtype=float))

"""Gaussian-process model of the residual accelerations.

One independent GP per output (x, y and roll residual) over the 9-D feature
vector ``[x_dot, y_dot, x_ddot, y_ddot, phi, phi_dot, phi_ddot, steer, v]`` with
an ARD squared-exponential kernel.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, optimize
from scipy.linalg import lapack
from scipy.stats import norm

from . import kernels
from .vehicle import VehicleParams, steer_from_yaw_rate

log = logging.getLogger(__name__)

N_FEATURES = kernels.N_FEAT
N_OUTPUTS = 3
OUTPUT_NAMES = ("x", "y", "phi")
FEATURE_NAMES = ("x_dot", "y_dot", "x_ddot", "y_ddot", "phi", "phi_dot", "phi_ddot", "steer", "v")
SCHEMA_VERSION = 1

_JITTER_START = 1e-10
_JITTER_CAP = 1e-6
_LOG_BOUNDS_W = (-14.0, 10.0)
_LOG_BOUNDS_SF = (-8.0, 5.0)
_LOG_BOUNDS_S0 = (-9.5, 2.0)


class GpFitError(RuntimeError):
    """The kernel matrix could not be factorised even after jitter escalation."""


@dataclass
class KernelHyperparams:
    """ARD squared-exponential hyperparameters, stored as logs."""

    log_w: np.ndarray
    log_sigma_f: float
    log_sigma_0: float

    def __post_init__(self):
        self.log_w = np.asarray(self.log_w, dtype=float).reshape(-1)
        self.log_sigma_f = float(self.log_sigma_f)
        self.log_sigma_0 = float(self.log_sigma_0)

    @classmethod
    def from_values(cls, w, sigma_f, sigma_0):
        w = np.asarray(w, dtype=float)
        if np.any(w <= 0) or sigma_f <= 0 or sigma_0 <= 0:
            raise ValueError("hyperparameters must be strictly positive")
        return cls(np.log(w), math.log(sigma_f), math.log(sigma_0))

    @property
    def w(self) -> np.ndarray:
        return np.exp(self.log_w)

    @property
    def sigma_f(self) -> float:
        return math.exp(self.log_sigma_f)

    @property
    def sigma_0(self) -> float:
        return math.exp(self.log_sigma_0)

    def theta(self) -> np.ndarray:
        return np.concatenate([self.log_w, [self.log_sigma_f, self.log_sigma_0]])

    @classmethod
    def from_theta(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:-2], theta[-2], theta[-1])

    def to_dict(self):
        return {"log_w": self.log_w.tolist(), "log_sigma_f": self.log_sigma_f,
                "log_sigma_0": self.log_sigma_0}


def kernel(xi_a, xi_b, hp: KernelHyperparams, same_point: bool = False) -> float:
    """``sigma_f^2 exp(-0.5 d^T W d) + sigma_0^2 [same_point]``."""
    d = np.asarray(xi_a, dtype=float) - np.asarray(xi_b, dtype=float)
    val = hp.sigma_f ** 2 * math.exp(-0.5 * float(np.sum(hp.w * d * d)))
    if same_point:
        val += hp.sigma_0 ** 2
    return val


def _sq_dists(X):
    # (F, N, N) per-feature squared differences.
    return (X.T[:, :, None] - X.T[:, None, :]) ** 2


def _cholesky(K, sf2):
    try:
        return linalg.cholesky(K, lower=True), 0.0
    except linalg.LinAlgError:
        pass
    jitter = _JITTER_START
    cap = _JITTER_CAP * sf2
    n = K.shape[0]
    while jitter <= cap * (1 + 1e-12):
        try:
            return linalg.cholesky(K + jitter * np.eye(n), lower=True), jitter
        except linalg.LinAlgError:
            jitter *= 10.0
    raise GpFitError(f"kernel matrix not positive definite (jitter up to {cap:.3g}, "
                     f"min diag {np.min(np.diag(K)):.3g})")


def log_marginal_likelihood(X, y, hp: KernelHyperparams, D2=None, grad=False):
    """Log evidence of targets ``y`` under the GP prior, optionally with its gradient
    with respect to ``hp.theta()``."""
    if D2 is None:
        D2 = _sq_dists(X)
    w, sf2, s02 = hp.w, hp.sigma_f ** 2, hp.sigma_0 ** 2
    n = len(y)
    n_feat = D2.shape[0]
    D2flat = D2.reshape(n_feat, -1)
    Kse = sf2 * np.exp(-0.5 * (w @ D2flat)).reshape(n, n)
    K = Kse + s02 * np.eye(n)
    L, _ = _cholesky(K, sf2)
    alpha = linalg.cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2 * math.pi)
    if not grad:
        return lml
    Kinv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise GpFitError(f"dpotri failed with info={info}")
    Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
    A = np.outer(alpha, alpha) - Kinv
    AK = A * Kse
    g = np.empty(len(w) + 2)
    g[:-2] = -0.25 * w * (D2flat @ AK.ravel())
    g[-2] = np.sum(AK)
    g[-1] = s02 * np.trace(A)
    return lml, g


@dataclass
class TrainingSet:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if self.X.shape[0] != self.Y.shape[0] or self.X.shape[0] < 1:
            raise ValueError("X and Y must hold the same positive number of rows")
        if self.X.shape[1] != N_FEATURES or self.Y.shape[1] != N_OUTPUTS:
            raise ValueError(f"expected X (N, {N_FEATURES}) and Y (N, {N_OUTPUTS})")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise ValueError("training data must be finite")

    def __len__(self):
        return self.X.shape[0]

    def split(self, frac: float, seed: int = 0):
        rng = np.random.default_rng(seed)
        idx = rng.permutation(len(self))
        cut = int(round(frac * len(self)))
        a, b = idx[:cut], idx[cut:]
        return TrainingSet(self.X[a], self.Y[a]), TrainingSet(self.X[b], self.Y[b])


@dataclass
class GpModel:
    """Fitted per-output GPs with cached factorisations.

    Treat as immutable once built; all query methods are read-only.
    """

    X: np.ndarray
    Y: np.ndarray
    hyper: list
    eta: float = 0.95
    kappa: np.ndarray = None
    chol: list = field(default_factory=list, repr=False)
    alpha: np.ndarray = field(default=None, repr=False)
    jitter: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=float)
        self.Y = np.ascontiguousarray(self.Y, dtype=float)
        if self.kappa is None:
            self.kappa = np.full(N_OUTPUTS, calibrated_kappa(self.eta))
        self.kappa = np.asarray(self.kappa, dtype=float)
        if not self.chol:
            self._factorise()
        self._W = np.ascontiguousarray([h.w for h in self.hyper])
        self._sf2 = np.array([h.sigma_f ** 2 for h in self.hyper])
        self._s02 = np.array([h.sigma_0 ** 2 for h in self.hyper])

    def _factorise(self):
        D2 = _sq_dists(self.X)
        self.chol, self.jitter = [], []
        alpha = np.empty((N_OUTPUTS, len(self.X)))
        for j, hp in enumerate(self.hyper):
            K = hp.sigma_f ** 2 * np.exp(-0.5 * np.tensordot(hp.w, D2, axes=1))
            K[np.diag_indices_from(K)] += hp.sigma_0 ** 2
            L, jit = _cholesky(K, hp.sigma_f ** 2)
            self.chol.append(L)
            self.jitter.append(jit)
            alpha[j] = linalg.cho_solve((L, True), self.Y[:, j])
        self.alpha = np.ascontiguousarray(alpha)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def arrays(self):
        """``(X, W, sigma_f^2, K^-1 Y)`` in the layout the compiled kernels expect."""
        return self.X, self._W, self._sf2, self.alpha

    def predict_mean(self, xi) -> np.ndarray:
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        out = kernels.gp_mean(np.ascontiguousarray(xi), *self.arrays())
        return out[0] if out.shape[0] == 1 else out

    def predict(self, xi):
        """Posterior mean and variance (with observation noise) for one or more queries."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        mean = kernels.gp_mean(np.ascontiguousarray(xi), *self.arrays())
        var = np.empty_like(mean)
        for j, hp in enumerate(self.hyper):
            d2 = (xi[:, None, :] - self.X[None, :, :]) ** 2
            k = self._sf2[j] * np.exp(-0.5 * d2 @ self._W[j])  # (M, N)
            v = linalg.solve_triangular(self.chol[j], k.T, lower=True, check_finite=False)
            prior = self._sf2[j] + self._s02[j]
            var[:, j] = np.clip(prior - np.sum(v * v, axis=0), 0.0, prior)
        if mean.shape[0] == 1:
            return mean[0], var[0]
        return mean, var

    def predict_mean_grad(self, xi) -> np.ndarray:
        """Jacobian (3, 9) of the posterior mean with respect to the query."""
        xi = np.ascontiguousarray(xi, dtype=float)
        return kernels.gp_mean_grad(xi, *self.arrays())

    def error_margin(self, xi=None, variance=None) -> np.ndarray:
        """High-probability bound ``kappa_i sqrt(Sigma_i)`` on the prediction error."""
        if variance is None:
            _, variance = self.predict(xi)
        return self.kappa * np.sqrt(np.maximum(variance, 0.0))

    def coverage(self, X, Y) -> float:
        """Fraction of rows with ``||delta_f|| <= ||kappa * sqrt(Sigma)||``."""
        mu, var = self.predict(X)
        err = np.linalg.norm(np.asarray(Y, dtype=float) - mu, axis=-1)
        return float(np.mean(err <= np.linalg.norm(self.error_margin(variance=var), axis=-1)))

    def info_gain(self) -> np.ndarray:
        """Per-output ``max 0.5 ln|1 + sigma_0^-2 k(xi, xi')|`` over training pairs."""
        # the SE kernel peaks on the diagonal, so the max is attained at xi == xi'
        return 0.5 * np.log1p(self._sf2 / self._s02)

    def lemma_kappa(self, rkhs_norm) -> np.ndarray:
        """Theoretical margin multiplier for a known RKHS norm bound (diagnostic only)."""
        rkhs_norm = np.broadcast_to(np.asarray(rkhs_norm, dtype=float), (N_OUTPUTS,))
        m = N_OUTPUTS
        logterm = math.log(self.n / (1.0 - self.eta ** (1.0 / m))) ** 3
        return np.sqrt(2.0 * rkhs_norm ** 2 + 300.0 * self.info_gain() * logterm)

    def log_likelihoods(self) -> np.ndarray:
        return np.array([log_marginal_likelihood(self.X, self.Y[:, j], hp)
                         for j, hp in enumerate(self.hyper)])

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "features": self.X.tolist(),
            "targets": self.Y.tolist(),
            "hyperparams": {"dim": [h.to_dict() for h in self.hyper]},
            "eta": self.eta,
            "kappa": self.kappa.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GpModel":
        if doc.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported GP artifact version {doc.get('version')!r}")
        dims = doc["hyperparams"]["dim"]
        if len(dims) != N_OUTPUTS:
            raise ValueError("GP artifact must carry three output dimensions")
        hyper = [KernelHyperparams(d["log_w"], d["log_sigma_f"], d["log_sigma_0"]) for d in dims]
        data = TrainingSet(doc["features"], doc["targets"])
        return cls(data.X, data.Y, hyper, eta=float(doc["eta"]), kappa=doc["kappa"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GpModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def calibrated_kappa(eta: float) -> float:
    """Two-sided Gaussian quantile for coverage ``eta`` (1.96 at 0.95)."""
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    return float(norm.ppf(0.5 + 0.5 * eta))


def default_hyperparams(data: TrainingSet, j: int) -> KernelHyperparams:
    var = np.maximum(np.var(data.X, axis=0), 1e-6)
    sy = max(float(np.std(data.Y[:, j])), 1e-3)
    return KernelHyperparams(-np.log(var), math.log(sy), math.log(0.1 * sy))


def _fit_one(X, y, D2, init: KernelHyperparams, restarts: int, max_iter: int, rng):
    bounds = [_LOG_BOUNDS_W] * X.shape[1] + [_LOG_BOUNDS_SF, _LOG_BOUNDS_S0]
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def objective(theta):
        try:
            lml, g = log_marginal_likelihood(X, y, KernelHyperparams.from_theta(theta), D2, grad=True)
        except GpFitError:
            return 1e25, np.zeros_like(theta)
        return -lml, -g

    theta0 = np.clip(init.theta(), lo, hi)
    best_theta, best_val = theta0, objective(theta0)[0]
    init_val = best_val
    for r in range(max(restarts, 1)):
        start = theta0 if r == 0 else np.clip(theta0 + rng.normal(0.0, 1.0, theta0.shape), lo, hi)
        res = optimize.minimize(objective, start, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": max_iter, "gtol": 1e-6})
        log.debug("restart %d: -lml %.6g (%s)", r, res.fun, res.message)
        if res.fun < best_val:
            best_theta, best_val = res.x, res.fun
    if best_val >= 1e24:
        raise GpFitError("no restart produced a factorisable kernel matrix")
    return KernelHyperparams.from_theta(best_theta), -best_val, -init_val


def fit(data: TrainingSet, init=None, restarts: int = 5, max_iter: int = 200,
        eta: float = 0.95, kappa=None, seed: int = 0) -> GpModel:
    """Maximise the log marginal likelihood separately for each output.

    Args:
        data: training set, at least two rows.
        init: one :class:`KernelHyperparams` (shared) or a list of three; defaults
            to inverse feature variances and target scale.
        restarts: optimiser runs per output; the first starts at ``init``.
        max_iter: L-BFGS-B iteration cap per run.
    """
    if len(data) < 2:
        raise ValueError("fitting needs at least two samples")
    rng = np.random.default_rng(seed)
    D2 = _sq_dists(data.X)
    hyper = []
    for j in range(N_OUTPUTS):
        if init is None:
            start = default_hyperparams(data, j)
        elif isinstance(init, KernelHyperparams):
            start = init
        else:
            start = init[j]
        hp, lml, lml0 = _fit_one(data.X, data.Y[:, j], D2, start, restarts, max_iter, rng)
        log.info("GP[%s]: log-likelihood %.3f (init %.3f)", OUTPUT_NAMES[j], lml, lml0)
        hyper.append(hp)
    return GpModel(data.X, data.Y, hyper, eta=eta, kappa=kappa)


# --------------------------------------------------------------------------
# data collection
# --------------------------------------------------------------------------

@dataclass
class Excitation:
    """Input schedule that keeps the unstable roll bounded while sweeping the feature box.

    Yaw rate = balance feedback towards a slowly swept roll target plus three
    sinusoids; speed follows a triangle wave.
    """

    amplitudes: tuple = (0.3, 0.2, 0.1)
    frequencies: tuple = (0.3, 0.7, 1.3)
    v_low: float = 1.0
    v_high: float = 5.0
    v_period: float = 20.0
    roll_center: float = math.radians(-15.0)
    roll_amplitude: float = math.radians(27.0)
    roll_frequencies: tuple = (0.11, 0.37)
    kp: float = 20.0
    kd: float = 6.0
    sample_rate: float = 50.0
    substeps: int = 10
    phi_box: float = math.radians(60.0)
    phi_dot_box: float = 4.0
    episode_length: float = 0.2

    def speed_ref(self, t, phase):
        tt = (t / self.v_period + phase) % 1.0
        tri = 2.0 * tt if tt < 0.5 else 2.0 * (1.0 - tt)
        slope = 2.0 * (self.v_high - self.v_low) / self.v_period
        return self.v_low + (self.v_high - self.v_low) * tri, (slope if tt < 0.5 else -slope)

    def roll_ref(self, t, phases):
        w = [2 * math.pi * f for f in self.roll_frequencies]
        a = self.roll_amplitude / len(w)
        return self.roll_center + sum(a * math.sin(wi * t + p) for wi, p in zip(w, phases))

    def yaw_excitation(self, t, phases):
        return sum(a * math.sin(2 * math.pi * f * t + p)
                   for a, f, p in zip(self.amplitudes, self.frequencies, phases))


def collect_training_data(params: VehicleParams, n: int, excitation: Excitation | None = None,
                          noise_std: float = 0.01, residual: bool = True, seed: int = 0,
                          v0: float | None = None) -> TrainingSet:
    """Simulate the plant under the excitation schedule and record residual targets.

    Targets are true minus nominal accelerations plus Gaussian noise. Samples
    leaving the validity box are rejected and the plant is re-seeded upright.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    ex = excitation or Excitation()
    rng = np.random.default_rng(seed)
    P = params.vector()
    mode = kernels.RES_SYNTH if residual else kernels.RES_NONE
    dt = 1.0 / ex.sample_rate
    h = dt / ex.substeps
    k_roll = params.m * params.l_G / params.J_t
    per_episode = int(round(ex.episode_length * ex.sample_rate)) if ex.episode_length > 0 else 0

    def new_episode(first):
        v_phase = rng.uniform()
        roll_phases = rng.uniform(0, 2 * math.pi, len(ex.roll_frequencies))
        yaw_phases = rng.uniform(0, 2 * math.pi, len(ex.amplitudes))
        v_start, _ = ex.speed_ref(0.0, v_phase)
        if first and v0 is not None:
            v_start = v0
        s0 = np.array([0.0, 0.0, rng.uniform(-math.pi, math.pi), v_start,
                       ex.roll_ref(0.0, roll_phases), 0.0])
        return s0, v_phase, roll_phases, yaw_phases

    s, v_phase, roll_phases, yaw_phases = new_episode(True)
    X, Y = [], []
    t = 0.0
    in_episode = 0
    guard = 0
    while len(X) < n:
        guard += 1
        if guard > 50 * n:
            raise RuntimeError("excitation keeps leaving the validity box")
        if per_episode and in_episode >= per_episode:
            s, v_phase, roll_phases, yaw_phases = new_episode(False)
            t, in_episode = 0.0, 0
        v_ref, v_slope = ex.speed_ref(t, v_phase)
        u_v = v_slope + 2.0 * (v_ref - s[3])
        phi_ref = ex.roll_ref(t, roll_phases)
        f_phi = k_roll * params.g * math.sin(s[4])
        g_phi = k_roll * s[3] * math.cos(s[4])
        phidd_des = -ex.kp * (s[4] - phi_ref) - ex.kd * s[5]
        u_psi = (phidd_des - f_phi) / g_phi + ex.yaw_excitation(t, yaw_phases)
        u = np.array([u_v, u_psi])
        states, accs = kernels.rollout(s, np.tile(u, (1, ex.substeps, 1)),
                                       np.zeros((ex.substeps, 2)), h, P, mode)
        ok = abs(s[4]) <= ex.phi_box and abs(s[5]) <= ex.phi_dot_box and s[3] > 0.1
        if ok:
            true_acc = accs[0, 0]
            nom = kernels.rollout(s, u[None, None, :], np.zeros((1, 2)), 0.0, P)[1][0, 0]
            steer = steer_from_yaw_rate(s[3], u_psi, s[4] + params.phi_G, params)
            X.append([s[3] * math.cos(s[2]), s[3] * math.sin(s[2]), true_acc[0], true_acc[1],
                      s[4], s[5], true_acc[2], steer, s[3]])
            Y.append(true_acc - nom + rng.normal(0.0, noise_std, 3) * (noise_std > 0))
            s = states[0, -1].copy()
            in_episode += 1
        else:
            s = np.array([s[0], s[1], s[2], max(v_ref, 1.0), phi_ref, 0.0])
        t += dt
    return TrainingSet(np.array(X), np.array(Y))

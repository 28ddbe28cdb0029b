"""Closed-loop simulation, scenario configs, run logs and summary metrics."""
from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .cbf import BarrierSpec, barrier_value, h_delta_max_estimate, perturbation_bound
from .controller import (BemConfig, Controller, ControllerConfig, KickConfig, LineReference,
                         GoalReference, PathReference, MpcConfig, NoReference, RollGains,
                         WaypointReference)
from .gp import GpModel
from .vehicle import VehicleParams, VehicleState

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class PlantDivergence(RuntimeError):
    pass


# --------------------------------------------------------------------------
# scenario configuration
# --------------------------------------------------------------------------

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "name": "scenario",
    "initial": {"x": 0.0, "y": 0.0, "psi": 0.0, "v": 2.0, "phi": 0.0, "phi_dot": 0.0},
    "plant": "synthetic",
    "hold_speed": True,
    "reference": {"kind": "none"},
    "obstacles": [],
    "phi_max_deg": None,
    "phi_dot_max_deg": None,
    "gamma_obstacle": [1.0, 1.5],
    "gamma_roll": [1.0, 1.5],
    "gamma_rate": [1.5],
    "variance_margin": True,
    "roll_cbf": True,
    "controller": {
        "mpc": {},
        "bem": {},
        "roll": {},
        "pd_gains": [4.0, 4.0],
        "reproject": "none",
        "stunt_start": 0.0,
        "kick": None,
        "gp_feedforward": False,
        "use_gp": True,
    },
    "duration": 10.0,
    "dt": 0.02,
    "substeps": 10,
    "seed": 0,
    "goal_tolerance": 0.3,
    "goal_capture": 0.0,
    "roll_floor": True,
    "sweep": None,
    "normalize_time": False,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(doc: dict, dotted: str, value) -> dict:
    """Set ``a.b.c`` in a nested dict; missing intermediate dicts are created."""
    doc = copy.deepcopy(doc)
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {k!r} in override {dotted!r}")
    node[keys[-1]] = value
    return doc


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


@dataclass
class ScenarioConfig:
    """Validated scenario document plus the objects built from it."""

    doc: dict

    def __post_init__(self):
        unknown = set(self.doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        self.doc = _merge(DEFAULTS, self.doc)
        d = self.doc
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {d.get('schema_version')!r}")
        if d["duration"] <= 0 or d["dt"] <= 0 or int(d["substeps"]) < 1:
            raise ConfigError("duration and dt must be positive, substeps >= 1")
        if d["plant"] not in ("synthetic", "nominal"):
            raise ConfigError("plant must be 'synthetic' or 'nominal'")
        start = np.array([d["initial"]["x"], d["initial"]["y"]])
        obs = self.obstacles
        for i, (xc, yc, R, Re) in enumerate(obs):
            if R <= 0 or Re < 0:
                raise ConfigError(f"obstacle {i}: need R > 0 and R_eps >= 0")
            if math.hypot(*(start - (xc, yc))) <= R + Re:
                raise ConfigError(f"obstacle {i} overlaps the start position")
            for j in range(i):
                xj, yj, Rj, _ = obs[j]
                if math.hypot(xc - xj, yc - yj) <= R + Rj:
                    raise ConfigError(f"obstacles {j} and {i} overlap")
        try:
            self.controller_config()
            self.barriers()
            self.reference()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_file(cls, path, overrides=()) -> "ScenarioConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        for item in overrides:
            k, v = parse_override(item) if isinstance(item, str) else item
            doc = apply_override(doc, k, v)
        return cls(doc)

    @property
    def name(self) -> str:
        return self.doc["name"]

    @property
    def obstacles(self) -> list:
        return [tuple(float(a) for a in o) for o in self.doc["obstacles"]]

    @property
    def dt(self) -> float:
        return float(self.doc["dt"])

    def initial_state(self) -> VehicleState:
        return VehicleState(**{k: float(v) for k, v in self.doc["initial"].items()})

    def controller_config(self) -> ControllerConfig:
        c = self.doc["controller"]
        mpc = dict(c.get("mpc") or {})
        for key in ("W1", "W2"):
            if key in mpc:
                mpc[key] = tuple(mpc[key])
        if "steer_max_deg" in mpc:
            mpc["steer_max"] = math.radians(mpc.pop("steer_max_deg"))
        mpc.setdefault("dt", self.dt)
        mpc.setdefault("hold_speed", bool(self.doc["hold_speed"]))
        mpc.setdefault("roll_floor", bool(self.doc["roll_floor"]))
        kick = c.get("kick")
        if kick is not None:
            kick = KickConfig(steer=math.radians(kick.get("steer_deg", 30.0)),
                              release_phi=math.radians(kick.get("release_phi_deg", -10.0)),
                              max_duration=kick.get("max_duration", 3.0))
        return ControllerConfig(mpc=MpcConfig(**mpc), bem=BemConfig(**(c.get("bem") or {})),
                                roll=RollGains(**(c.get("roll") or {})),
                                pd_gains=tuple(c.get("pd_gains", (4.0, 4.0))),
                                reproject=c.get("reproject", "none"),
                                stunt_start=float(c.get("stunt_start", 0.0)), kick=kick,
                                gp_feedforward=bool(c.get("gp_feedforward", False)),
                                use_gp=bool(c.get("use_gp", True)))

    def barriers(self, roll: bool | None = None) -> list[BarrierSpec]:
        d = self.doc
        vm = bool(d["variance_margin"])
        out = [BarrierSpec.obstacle(xc, yc, R, Re, gamma=tuple(d["gamma_obstacle"]),
                                    variance_margin=vm, name=f"obstacle{i}")
               for i, (xc, yc, R, Re) in enumerate(self.obstacles)]
        if roll is None:
            roll = bool(d["roll_cbf"])
        if roll and d["phi_max_deg"] is not None:
            out.append(BarrierSpec.roll_angle(math.radians(d["phi_max_deg"]),
                                              gamma=tuple(d["gamma_roll"]), variance_margin=vm,
                                              name="roll"))
        if roll and d["phi_dot_max_deg"] is not None:
            out.append(BarrierSpec.roll_rate(math.radians(d["phi_dot_max_deg"]),
                                             gamma=tuple(d["gamma_rate"]), name="roll_rate"))
        return out

    def reference(self):
        r = self.doc["reference"]
        kind = r.get("kind", "none")
        init = self.doc["initial"]
        if kind == "none":
            return NoReference()
        if kind == "waypoint":
            start = r.get("start", [init["x"], init["y"]])
            return WaypointReference(start, r["goal"], r.get("speed", init["v"]))
        if kind == "goal":
            return GoalReference(r["goal"], r.get("speed", init["v"]))
        if kind == "line":
            return LineReference(r["a"], r["b"], r.get("origin", (0.0, 0.0)))
        if kind == "path":
            return PathReference(r["a"], r["b"], r.get("origin", (0.0, 0.0)),
                                 r.get("lookahead", 5.0))
        raise ConfigError(f"unknown reference kind {kind!r}")

    def goal(self):
        r = self.doc["reference"]
        return np.asarray(r["goal"], dtype=float) if r.get("kind") in ("waypoint", "goal") else None

    def sweep_runs(self) -> list["ScenarioConfig"]:
        """One config per sweep value; the config itself when no sweep is declared."""
        sweep = self.doc.get("sweep")
        if not sweep:
            return [self]
        runs = []
        for key, values in sweep.items():
            for v in values:
                doc = apply_override(self.doc, key, v)
                doc["sweep"] = None
                doc["name"] = f"{self.name}_{key.split('.')[-1]}{v}"
                runs.append(ScenarioConfig(doc))
        return runs


# --------------------------------------------------------------------------
# plant
# --------------------------------------------------------------------------

def step_plant(state, u, dt: float, substeps: int = 10, params: VehicleParams | None = None,
               synthetic: bool = True, hold_speed: bool = False, floor: bool = True) -> np.ndarray:
    """RK4 over ``substeps`` internal steps with the input held (zero-order hold)."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    params = params or VehicleParams()
    s = state.array() if isinstance(state, VehicleState) else np.asarray(state, dtype=float)
    U = np.tile(np.asarray(u, dtype=float), (1, substeps, 1))
    mode = kernels.RES_SYNTH if synthetic else kernels.RES_NONE
    states, _ = kernels.rollout(s, U, np.zeros((substeps, 2)), dt / substeps, params.vector(),
                                mode, hold_speed, floor)
    out = states[0, -1]
    if not np.all(np.isfinite(out)):
        raise PlantDivergence("non-finite plant state")
    return out


# --------------------------------------------------------------------------
# logs and metrics
# --------------------------------------------------------------------------

BASE_COLUMNS = ["t", "x", "y", "psi", "v", "phi", "phi_dot", "u_v", "u_psi_nom", "u_psi_safe",
                "u_psi_final", "steer_deg", "phi_e", "gamma_resid"]


@dataclass
class RunLog:
    columns: list
    rows: list = field(default_factory=list)
    barrier_names: list = field(default_factory=list)

    def array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float).reshape(-1, len(self.columns))

    def col(self, name) -> np.ndarray:
        return self.array()[:, self.columns.index(name)]

    def h(self) -> np.ndarray:
        a = self.array()
        idx = [i for i, c in enumerate(self.columns) if c.startswith("h_")]
        return a[:, idx]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "RunLog":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            cols = next(r)
            rows = [[float(v) for v in row] for row in r]
        return cls(cols, rows)


@dataclass
class RunMetrics:
    name: str
    max_abs_roll_deg: float
    max_abs_curvature: float
    min_h: float
    min_h_obstacle: float | None
    min_h_per_barrier: dict
    mean_cycle_ms: float
    max_cycle_ms: float
    tracking_rmse: float
    final_tracking_error: float
    collision: bool
    min_clearance: float
    rollover: bool
    max_roll_deg: float
    max_abs_roll_rate_deg: float
    h_delta_max: float
    flag_counts: dict
    aborted: bool = False
    abort_reason: str = ""
    steps: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, path) -> "RunMetrics":
        return cls(**json.loads(Path(path).read_text()))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))


def _finite(x: float, fallback: float = 0.0) -> float:
    return float(x) if math.isfinite(x) else fallback


# --------------------------------------------------------------------------
# runner
# --------------------------------------------------------------------------

def run_scenario(cfg: ScenarioConfig, gp: GpModel | None = None, deterministic: bool = False,
                 params: VehicleParams | None = None) -> tuple[RunLog, RunMetrics]:
    """Alternate one control step and one plant period until the duration or the goal.

    With ``deterministic`` the cycle-time column is written as zero so logs
    from repeated runs compare byte for byte.
    """
    params = params or VehicleParams()
    ccfg = cfg.controller_config()
    barriers = cfg.barriers()
    ref = cfg.reference()
    ctrl = Controller(ccfg, barriers, ref, gp, params)
    d = cfg.doc
    dt, sub = cfg.dt, int(d["substeps"])
    synthetic = d["plant"] == "synthetic"
    hold = bool(d["hold_speed"])
    floor = bool(d["roll_floor"])
    n_steps = int(round(d["duration"] / dt))
    goal = cfg.goal()
    obstacles = cfg.obstacles
    kappa = gp.kappa if gp is not None and ccfg.use_gp else None

    columns = BASE_COLUMNS + [f"h_{i}" for i in range(len(barriers))] + ["cycle_ms", "t_norm", "e_track"]
    log = RunLog(columns, barrier_names=[b.name for b in barriers])
    s = cfg.initial_state().array()
    flag_counts: dict = {}
    bounds = [[] for _ in barriers]
    curv, e_track, clearance = [], [], []
    aborted, reason = False, ""
    prev_dist = math.inf
    P = params.vector()
    for k in range(n_steps + 1):
        t = k * dt
        state = VehicleState.from_array(s)
        try:
            out = ctrl.step(t, state)
        except (ArithmeticError, ValueError) as e:
            aborted, reason = True, f"controller failure at t={t:.2f}: {e}"
            break
        for f in out.flags:
            flag_counts[f] = flag_counts.get(f, 0) + 1
        var = None
        if kappa is not None:
            xi = kernels.features(s, out.u_nominal, P)
            _, var = gp.predict(xi)
            var = np.asarray(var).reshape(3)
            margin = kappa * np.sqrt(var)
            for i, b in enumerate(barriers):
                bounds[i].append(perturbation_bound(b, state, margin))
        hs = [barrier_value(b, state, var) for b in barriers]
        c = math.cos(state.phi + params.phi_G)
        u = out.u_final
        steer = math.degrees(math.atan(u[1] * params.l_1 * c / state.v)) if abs(state.v) > 1e-6 else 0.0
        ds, _ = kernels._deriv_np(s[None, :], u[None, :], P,
                                  kernels.RES_SYNTH if synthetic else kernels.RES_NONE, hold,
                                  None, None, None, None, None)
        curv.append(ds[0, 2] / state.v if abs(state.v) > 1e-6 else 0.0)
        e_track.append(ref.error(t, state))
        for xc, yc, R, _ in obstacles:
            clearance.append(math.hypot(state.x - xc, state.y - yc) - R)
        cyc = 0.0 if deterministic else out.cycle_ms
        log.rows.append([t, *s, u[0], out.u_nominal[1], out.u_safe[1], u[1], steer, out.phi_e,
                         out.gamma_resid, *hs, cyc, 0.0, e_track[-1]])
        if goal is not None:
            dist = math.hypot(state.x - goal[0], state.y - goal[1])
            if dist <= d["goal_tolerance"]:
                break
            # closest approach inside the capture radius also counts as arrival
            if dist < d["goal_capture"] and dist > prev_dist:
                break
            prev_dist = dist
        if k == n_steps:
            break
        try:
            s = step_plant(s, u, dt, sub, params, synthetic, hold, floor)
        except PlantDivergence as e:
            aborted, reason = True, str(e)
            break
    if not log.rows:
        nan = math.nan
        return log, RunMetrics(cfg.name, nan, nan, nan, None, {}, 0.0, 0.0, nan, nan, False,
                               math.inf, False, nan, nan, 0.0, flag_counts, True, reason, 0)
    # normalised time column
    t_end = log.rows[-1][0] if log.rows[-1][0] > 0 else 1.0
    for row in log.rows:
        row[-2] = row[0] / t_end

    a = log.array()
    phi = a[:, columns.index("phi")]
    hcols = log.h()
    obstacle_idx = [i for i, b in enumerate(barriers) if not b.is_roll]
    cyc_col = a[:, columns.index("cycle_ms")]
    hd = 0.0
    for i, b in enumerate(barriers):
        if bounds[i]:
            hd = max(hd, h_delta_max_estimate(bounds[i], b.gamma, dt))
    per_barrier = {(b.name or f"h_{i}"): float(hcols[:, i].min()) for i, b in enumerate(barriers)}
    metrics = RunMetrics(
        name=cfg.name,
        max_abs_roll_deg=float(np.degrees(np.abs(phi).max())),
        max_abs_curvature=float(np.abs(curv).max()),
        min_h=_finite(float(hcols.min())) if hcols.size else 0.0,
        min_h_obstacle=float(hcols[:, obstacle_idx].min()) if obstacle_idx else None,
        min_h_per_barrier=per_barrier,
        mean_cycle_ms=float(cyc_col.mean()),
        max_cycle_ms=float(cyc_col.max()),
        tracking_rmse=float(np.sqrt(np.mean(np.square(e_track)))),
        final_tracking_error=float(e_track[-1]),
        collision=bool(clearance and min(clearance) < 0.0),
        min_clearance=float(min(clearance)) if clearance else math.inf,
        rollover=bool(np.any(np.abs(phi + params.phi_G) > math.pi / 2)),
        max_roll_deg=float(np.degrees(phi.max())),
        max_abs_roll_rate_deg=float(np.degrees(np.abs(a[:, columns.index("phi_dot")]).max())),
        h_delta_max=float(hd),
        flag_counts=dict(sorted(flag_counts.items())),
        aborted=aborted,
        abort_reason=reason,
        steps=len(log.rows),
    )
    return log, metrics


def metric_table(runs: list[RunMetrics]) -> str:
    """Markdown table with the summary metric columns plus tracking RMSE."""
    if not runs:
        raise ValueError("need at least one run")
    lines = ["| run | abs(phi)_max [deg] | abs(rho)_max [1/m] | h_min | cycle [ms] | tracking RMSE [m] |",
             "|---|---|---|---|---|---|"]
    for m in runs:
        lines.append(f"| {m.name} | {m.max_abs_roll_deg:.2f} | {m.max_abs_curvature:.3f} | "
                     f"{m.min_h if m.min_h_obstacle is None else m.min_h_obstacle:.3f} | "
                     f"{m.mean_cycle_ms:.1f} | {m.tracking_rmse:.3f} |")
    return "\n".join(lines) + "\n"

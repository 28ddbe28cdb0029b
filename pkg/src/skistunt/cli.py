"""Command-line front end: ``skistunt {train-gp,run,sweep,table,plot}``.

Exit codes: 0 ok, 1 a run aborted, 2 configuration error, 3 GP artifact error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import gp as gpmod
from . import plotting
from .simulator import (ConfigError, RunLog, RunMetrics, ScenarioConfig, apply_override,
                        metric_table, parse_override, run_scenario)
from .vehicle import VehicleParams

EXIT_OK, EXIT_ABORT, EXIT_CONFIG, EXIT_GP = 0, 1, 2, 3
log = logging.getLogger("skistunt")

TRAIN_DEFAULTS = {
    "n_samples": 1000,
    "noise_std": 0.01,
    "residual": True,
    "restarts": 5,
    "max_iter": 200,
    "eta": 0.95,
    "seed": 0,
    "holdout": 0.2,
    "excitation": {},
}


def default_gp_path() -> Path:
    return Path(str(resources.files("skistunt") / "data" / "gp_default.json"))


def scenario_path(name: str) -> Path:
    """Resolve ``fig2`` or ``fig2.json`` to a bundled scenario, or return the path as given."""
    p = Path(name)
    if p.exists():
        return p
    stem = p.name if p.suffix else p.name + ".json"
    bundled = Path(str(resources.files("skistunt") / "scenarios" / stem))
    return bundled if bundled.exists() else p


def bundled_scenarios() -> list[Path]:
    root = Path(str(resources.files("skistunt") / "scenarios"))
    return sorted(root.glob("*.json"))


def _out_dir(arg: str | None) -> Path:
    out = Path(arg or os.environ.get("SKISTUNT_OUT", "skistunt_out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# train-gp
# --------------------------------------------------------------------------

def train_config(path: str | None, overrides) -> dict:
    doc = json.loads(json.dumps(TRAIN_DEFAULTS))
    if path:
        doc.update(json.loads(Path(path).read_text()))
    for text in overrides:
        key, value = parse_override(text)
        doc = apply_override(doc, key, value)
    unknown = set(doc) - set(TRAIN_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown training keys: {sorted(unknown)}")
    ex_fields = {f.name for f in fields(gpmod.Excitation)}
    bad = set(doc["excitation"]) - ex_fields
    if bad:
        raise ConfigError(f"unknown excitation keys: {sorted(bad)}")
    if int(doc["n_samples"]) < 2:
        raise ConfigError("n_samples must be >= 2")
    return doc


def train_gp(doc: dict, seed: int | None = None):
    """Collect data, fit and report held-out RMSE. Returns ``(model, rmse)``."""
    seed = int(doc["seed"] if seed is None else seed)
    ex = gpmod.Excitation(**{k: (tuple(v) if isinstance(v, list) else v)
                             for k, v in doc["excitation"].items()})
    P = VehicleParams()
    n = int(doc["n_samples"])
    data = gpmod.collect_training_data(P, n, ex, noise_std=float(doc["noise_std"]),
                                       residual=bool(doc["residual"]), seed=seed)
    n_test = max(int(round(doc["holdout"] * n)), 1)
    test = gpmod.collect_training_data(P, n_test, ex, noise_std=float(doc["noise_std"]),
                                       residual=bool(doc["residual"]), seed=seed + 10_000)
    model = gpmod.fit(data, restarts=int(doc["restarts"]), max_iter=int(doc["max_iter"]),
                      eta=float(doc["eta"]), seed=seed)
    err = model.predict_mean(test.X) - test.Y
    rmse = np.sqrt(np.mean(err ** 2, axis=0))
    return model, rmse


def cmd_train_gp(args) -> int:
    try:
        doc = train_config(args.config, args.override)
    except (ConfigError, ValueError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        model, rmse = train_gp(doc, args.seed)
    except (gpmod.GpFitError, RuntimeError, np.linalg.LinAlgError) as e:
        print(f"GP fit failed: {e}", file=sys.stderr)
        return EXIT_GP
    out = Path(args.out) if args.out else _out_dir(None) / "gp.json"
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "gp.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    for name, r in zip(gpmod.OUTPUT_NAMES, rmse):
        print(f"held-out RMSE {name}: {r:.5f}")
    print(f"wrote {out} ({model.n} training rows)")
    return EXIT_OK


# --------------------------------------------------------------------------
# run / sweep
# --------------------------------------------------------------------------

def _overrides(args) -> list:
    out = list(args.override)
    if args.seed is not None:
        out.append(f"seed={args.seed}")
    if args.nominal_only:
        out.append("controller.use_gp=false")
    return out


def _run_one(job):
    cfg_doc, gp_path, deterministic, out_dir, stem = job
    cfg = ScenarioConfig(cfg_doc)
    model = gpmod.GpModel.load(gp_path) if gp_path else None
    runlog, metrics = run_scenario(cfg, model, deterministic=deterministic)
    runlog.to_csv(Path(out_dir) / f"{stem}.csv")
    metrics.to_json(Path(out_dir) / f"{stem}.json")
    return metrics


def _execute(args, sweep: bool) -> int:
    try:
        base = ScenarioConfig.from_file(scenario_path(args.config), _overrides(args))
        runs = base.sweep_runs() if sweep else [base]
    except (ConfigError, ValueError, OSError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    gp_path = None
    if not args.nominal_only and base.doc["controller"].get("use_gp", True):
        gp_path = Path(args.gp) if args.gp else default_gp_path()
        try:
            gpmod.GpModel.load(gp_path)
        except (OSError, ValueError, KeyError) as e:
            print(f"GP artifact error: {e}", file=sys.stderr)
            return EXIT_GP
    out = _out_dir(args.out)
    jobs = [(r.doc, str(gp_path) if gp_path else None, args.deterministic, str(out),
             r.name) for r in runs]
    n_jobs = max(1, int(getattr(args, "jobs", 1) or 1))
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            metrics = list(pool.map(_run_one, jobs))
    else:
        metrics = [_run_one(j) for j in jobs]
    table = metric_table(metrics)
    (out / f"{base.name}_table.md").write_text(table)
    print(table, end="")
    if args.plot:
        _plot_runs([Path(out) / f"{j[4]}.csv" for j in jobs], base, out,
                   [j[4] for j in jobs], args.deterministic)
    aborted = [m.name for m in metrics if m.aborted]
    for m in metrics:
        if m.aborted:
            print(f"run {m.name} aborted: {m.abort_reason}", file=sys.stderr)
    return EXIT_ABORT if aborted else EXIT_OK


def cmd_run(args) -> int:
    return _execute(args, sweep=False)


def cmd_sweep(args) -> int:
    return _execute(args, sweep=True)


# --------------------------------------------------------------------------
# table / plot
# --------------------------------------------------------------------------

def cmd_table(args) -> int:
    paths = []
    for p in args.paths:
        p = Path(p)
        paths += sorted(p.glob("*.json")) if p.is_dir() else [p]
    metrics = []
    for p in paths:
        try:
            metrics.append(RunMetrics.from_json(p))
        except (OSError, TypeError, ValueError, KeyError):
            continue  # missing or not a metrics file
    if not metrics:
        print("no metrics files found", file=sys.stderr)
        return EXIT_CONFIG
    print(metric_table(metrics), end="")
    return EXIT_OK


def _plot_runs(csvs, cfg: ScenarioConfig | None, out: Path, labels, deterministic: bool):
    logs = [RunLog.from_csv(p) for p in csvs]
    obstacles = cfg.obstacles if cfg else []
    d = cfg.doc if cfg else {}
    phi_max = d.get("phi_max_deg")
    phi_dot_max = d.get("phi_dot_max_deg")
    normalized = bool(d.get("normalize_time", False))
    name = cfg.name if cfg else "runs"
    figs = {
        "trajectory": plotting.trajectory(logs, obstacles, labels),
        "roll": plotting.roll(logs, labels, phi_max, normalized),
        "steering": plotting.steering(logs, labels, normalized),
    }
    if obstacles:
        figs["cbf"] = plotting.cbf_value(logs, labels, normalized, n_obstacles=len(obstacles))
    if len(logs) == 1:
        figs["phase"] = plotting.phase_portrait(logs[0], phi_max, phi_dot_max)
        figs["errors"] = plotting.tracking_errors(logs[0])
    written = []
    for key, fig in figs.items():
        written.append(plotting.write(fig, out / f"{name}_{key}.svg", deterministic))
    return written


def cmd_plot(args) -> int:
    src = Path(args.logs)
    csvs = sorted(src.glob("*.csv")) if src.is_dir() else [src]
    if not csvs:
        print(f"no CSV logs under {src}", file=sys.stderr)
        return EXIT_CONFIG
    cfg = None
    if args.config:
        try:
            cfg = ScenarioConfig.from_file(scenario_path(args.config), args.override)
        except (ConfigError, ValueError, OSError) as e:
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_CONFIG
    out = _out_dir(args.out)
    labels = [p.stem for p in csvs]
    for p in _plot_runs(csvs, cfg, out, labels, args.deterministic):
        print(p)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="skistunt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required)
        p.add_argument("--out")
        p.add_argument("--override", action="append", default=[], metavar="K=V")
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("train-gp", help="collect excitation data and fit the residual GP")
    common(p, config_required=False)
    p.set_defaults(func=cmd_train_gp)

    for name, func in (("run", cmd_run), ("sweep", cmd_sweep)):
        p = sub.add_parser(name, help=f"{name} a scenario config")
        common(p)
        p.add_argument("--gp", help="GP artifact (default: bundled model)")
        p.add_argument("--nominal-only", action="store_true")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--plot", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("table", help="aggregate metrics JSON files")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("plot", help="render SVG figures from CSV logs")
    p.add_argument("logs", help="CSV file or directory of CSV logs")
    common(p, config_required=False)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return int(args.func(args))


if __name__ == "__main__":
    sys.exit(main())

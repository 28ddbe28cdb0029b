"""Compare the numba and numpy kernel backends.

Each backend runs in its own interpreter because the switch is read at import
time. Usage: ``python benchmarks/bench_backends.py [--repeat N]``.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

WORKER = r"""
import json, sys, timeit
import numpy as np
from skistunt import BACKEND, kernels
from skistunt.cli import default_gp_path, scenario_path
from skistunt.controller import Controller
from skistunt.gp import GpModel
from skistunt.simulator import ScenarioConfig
from skistunt.vehicle import VehicleParams, VehicleState

repeat = int(sys.argv[1])
P = VehicleParams()
gp = GpModel.load(default_gp_path())
arrays = gp.arrays()
rng = np.random.default_rng(0)
s0 = np.array([1.0, 1.5, 0.8, 2.0, 0.02, -0.1])
U = rng.normal(0, 0.3, (11, 5, 2))
Uf = np.zeros((5, 2))
Xq = gp.X[:200] + 0.01

cfg = ScenarioConfig.from_file(scenario_path("fig2"))
ctrl = Controller(cfg.controller_config(), cfg.barriers(), cfg.reference(), gp, P)
state = VehicleState(1.0, 1.5, 0.8, 2.0, 0.02, -0.1)

cases = {
    "rollout B=11 H=5 (GP)": lambda: kernels.rollout(s0, U, Uf, 0.02, P.vector(), kernels.RES_GP,
                                                     True, False, arrays),
    "rollout B=11 H=5 (synthetic)": lambda: kernels.rollout(s0, U, Uf, 0.02, P.vector(),
                                                            kernels.RES_SYNTH),
    "gp mean, 200 queries": lambda: kernels.gp_mean(Xq, *arrays),
    "gp mean gradient": lambda: kernels.gp_mean_grad(Xq[0], *arrays),
    "controller step H=5": lambda: ctrl.step(0.0, state),
}
out = {"backend": BACKEND, "cases": {}}
for name, fn in cases.items():
    fn()  # compile / warm caches
    n = max(1, repeat)
    t = min(timeit.repeat(fn, number=n, repeat=3)) / n
    out["cases"][name] = t * 1e3
print(json.dumps(out))
"""


def run_backend(disable: bool, repeat: int) -> dict:
    env = dict(os.environ, SKISTUNT_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20, help="calls per timing sample")
    args = ap.parse_args(argv)
    nb = run_backend(False, args.repeat)
    np_ = run_backend(True, args.repeat)
    if nb["backend"] != "numba":
        print("numba is unavailable; both columns use numpy", file=sys.stderr)
    print(f"| case | {nb['backend']} [ms] | {np_['backend']} [ms] | speed-up |")
    print("|---|---|---|---|")
    for name, t_nb in nb["cases"].items():
        t_np = np_["cases"][name]
        print(f"| {name} | {t_nb:.3f} | {t_np:.3f} | {t_np / t_nb:.1f}x |")
    return 0


if __name__ == "__main__":
    sys.exit(main())

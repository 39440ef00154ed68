"""Compare the numba kernels with the pure numpy fallback.

Each backend runs in its own interpreter because the choice is fixed at
import time by FMRLASSO_DISABLE_NUMBA. Usage::

    python3 benchmarks/bench_backends.py [--ptot 200 1000] [--reps 3]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from fmrlasso import BACKEND, OptimOptions, PenaltySpec, fit_bcd_gem, fit_scaled_lasso
from fmrlasso.simulation import generate, preset
from fmrlasso.scaled_lasso import lambda_max

ptots, reps = json.loads(sys.argv[1]), int(sys.argv[2])
out = {"backend": BACKEND, "rows": []}
for p_tot in ptots:
    data, _, _ = generate(preset("M1", p_tot), 0, n=200)
    lam = 0.3 * lambda_max(data)
    cases = [
        ("gem k=2", lambda: fit_bcd_gem(data, 2, PenaltySpec(lam, 1.0), OptimOptions(seed=0))),
        ("scaled lasso", lambda: fit_scaled_lasso(data, lam)),
    ]
    for name, run in cases:
        res = run()  # first call includes JIT compilation
        times = []
        for _ in range(reps):
            t = time.perf_counter()
            res = run()
            times.append(time.perf_counter() - t)
        out["rows"].append({"p_tot": p_tot, "case": name, "seconds": float(np.median(times)),
                            "criterion": float(res.criterion)})
print(json.dumps(out))
"""


def run_backend(disable_numba, ptots, reps):
    env = dict(os.environ)
    if disable_numba:
        env["FMRLASSO_DISABLE_NUMBA"] = "1"
    else:
        env.pop("FMRLASSO_DISABLE_NUMBA", None)
    proc = subprocess.run([sys.executable, "-c", WORKER, json.dumps(ptots), str(reps)],
                          env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--ptot", type=int, nargs="+", default=[200, 1000])
    parser.add_argument("--reps", type=int, default=3)
    args = parser.parse_args(argv)

    fast = run_backend(False, args.ptot, args.reps)
    slow = run_backend(True, args.ptot, args.reps)
    print(f"{'p_tot':>6} {'case':<14} {fast['backend']:>10} {slow['backend']:>10} "
          f"{'speedup':>8} {'crit diff':>10}")
    for a, b in zip(fast["rows"], slow["rows"]):
        print(f"{a['p_tot']:>6} {a['case']:<14} {a['seconds']:>9.4f}s {b['seconds']:>9.4f}s "
              f"{b['seconds'] / a['seconds']:>7.1f}x {abs(a['criterion'] - b['criterion']):>10.1e}")


if __name__ == "__main__":
    main()

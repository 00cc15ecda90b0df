"""Time the compiled MRF kernels against the pure-Python fallback.

Each backend runs in its own interpreter because the choice is made at
import time (``DCADMM_PURE``).

    python3 benchmarks/bench_kernels.py [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys

WORKLOAD = r"""
import json, sys, time
import numpy as np
from dcadmm import BalanceClique, MrfSolver, backend_name
from dcadmm.core import compile_energies
from dcadmm.dataio import grid_potts_edges
from dcadmm.mrf import MrfInstance, solve_mrf

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
out = {"backend": backend_name}

# ICM with balance cliques
n, k = 600, 4
truth = rng.integers(0, k, n)
terms = []
for _ in range(25):
    members = rng.choice(n, 25, replace=False)
    counts = np.bincount(truth[members], minlength=k)
    terms.append(BalanceClique(tuple(members), tuple(np.maximum(counts - 3, 0)),
                               tuple(counts + 3)))
icm = MrfInstance(rng.random((n, k)), compile_energies(terms, n, k))
y0 = truth.copy()

# alpha-expansion on a Potts grid
h, w = 40, 40
edges = grid_potts_edges(h, w, 0.3)
grid = MrfInstance(rng.random((h * w, 3)), compile_energies(edges, h * w, 3))
g0 = np.zeros(h * w, dtype=np.int64)

for name, mrf, warm, solver in (("icm_balance_600x4", icm, y0, MrfSolver.ICM),
                                ("expansion_grid_40x40x3", grid, g0, MrfSolver.ALPHA_EXPANSION)):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        res = solve_mrf(mrf, warm, solver=solver, seed=0, restarts=0)
        best = min(best, time.perf_counter() - start)
    out[name] = {"seconds": best, "energy": res.energy}
print(json.dumps(out))
"""


def run_backend(pure: bool, repeat: int) -> dict:
    env = dict(os.environ)
    env["DCADMM_PURE"] = "1" if pure else "0"
    proc = subprocess.run([sys.executable, "-c", WORKLOAD, str(repeat)], env=env,
                          capture_output=True, text=True, check=True)
    return json.loads(proc.stdout)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    fast = run_backend(False, args.repeat)
    slow = run_backend(True, args.repeat)
    print(f"{'workload':<26} {fast['backend']:>10} {slow['backend']:>10} {'speedup':>8}  same energy")
    for key in fast:
        if key == "backend":
            continue
        a, b = fast[key], slow[key]
        print(f"{key:<26} {a['seconds']:10.4f} {b['seconds']:10.4f} "
              f"{b['seconds'] / a['seconds']:8.1f}  {abs(a['energy'] - b['energy']) < 1e-9}")


if __name__ == "__main__":
    main()

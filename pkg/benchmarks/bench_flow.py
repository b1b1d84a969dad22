"""Compare the numba and numpy one-step flow kernels.

Usage: python benchmarks/bench_flow.py [--n 500 1000 5000] [--seeds 20] [--repeat 3]

For each sample size it times full `var_onestep` flows on seeded Simple-DGD
datasets (beta_p = 0) with each kernel, checks the two agree and prints the
median wall time per flow and the speed-up.
"""

import argparse
import statistics
import time

import numpy as np

from tve.data import DgdSpec, simulate
from tve.learners import LearnerSpec, fit_nuisances
from tve.variance import var_onestep


def _time(fn, repeat):
    best = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best.append(time.perf_counter() - t0)
    return min(best)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[500, 1000, 5000])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    # compile outside the timed region
    d, _ = simulate(DgdSpec("simple", 0.0, 0.0), 100, 0)
    var_onestep(d, fit_nuisances(d, LearnerSpec(), 0), use_numba=True)

    print(f"{'n':>6} {'flows':>5} {'steps':>7} {'numpy ms':>9} {'numba ms':>9} {'speed-up':>8} {'max |diff|':>10}")
    for n in args.n:
        cases = []
        for seed in range(args.seeds):
            d, _ = simulate(DgdSpec("simple", 0.0, 0.0), n, seed)
            cases.append((d, fit_nuisances(d, LearnerSpec(), seed)))
        t_np, t_nb, steps, diff = [], [], 0, 0.0
        for d, fit in cases:
            s_np, tr = var_onestep(d, fit, use_numba=False)
            s_nb, _ = var_onestep(d, fit, use_numba=True)
            steps += tr.steps
            diff = max(diff, abs(s_np - s_nb))
            t_np.append(_time(lambda: var_onestep(d, fit, use_numba=False), args.repeat))
            t_nb.append(_time(lambda: var_onestep(d, fit, use_numba=True), args.repeat))
        a, b = statistics.median(t_np) * 1e3, statistics.median(t_nb) * 1e3
        print(f"{n:>6} {len(cases):>5} {steps:>7} {a:>9.2f} {b:>9.2f} {a / b:>7.1f}x {diff:>10.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

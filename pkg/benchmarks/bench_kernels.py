"""Compiled core vs numpy fallback on the two hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from lyari import _kernels_py, load_baseline
from lyari.oracle import GridSpec, _tables

try:
    from lyari import _kernels
except ImportError:
    _kernels = None


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    sc = load_baseline()
    S, cfg = sc.system, sc.optimizer
    grid = GridSpec.default(S, cfg, 200)
    _, _, _, re_term, de, dly, rc_term, dc, ptot, tsend = _tables(S, cfg, 5e9, grid)
    search = (0.05, re_term, de, dly, rc_term, dc, ptot, tsend, cfg.V, cfg.rho1, cfg.rho2,
              cfg.d_max, cfg.d_max_trans, S.budget.Pmax)
    x = np.random.default_rng(0).uniform(0.01, 30.0, 200_000)

    impls = [("numpy", _kernels_py)] + ([("cython", _kernels)] if _kernels else [])
    print(f"grid {grid.size} points, entropy batch {x.size} values, best of {args.repeat}")
    base = {}
    for name, mod in impls:
        for label, fn in (("grid_search", lambda: mod.grid_search(*search)),
                          ("entropy_rate_batch", lambda: mod.entropy_rate_batch(x, 0.1))):
            t = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            base.setdefault(label, t)
            print(f"{name:7s} {label:19s} {t * 1e3:9.2f} ms  x{base[label] / t:5.2f}")
    if _kernels is None:
        print("compiled core not built; only the fallback was timed")


if __name__ == "__main__":
    main()

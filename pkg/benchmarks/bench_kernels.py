"""Timing of the compiled Darcy Newton kernel against its numpy twin.

    python benchmarks/bench_kernels.py [--samples 200] [--points 128] [--repeat 3]

Both backends are run on the same forcings; the script also reports the
largest difference between their solutions.
"""
import argparse
import time

import numpy as np

from hilbert_si import _darcy_py
from hilbert_si.darcy1d import forcing_field
from hilbert_si.function_space import Grid
from hilbert_si.gaussian_field import sample_batch

try:
    from hilbert_si import _darcy_core
except ImportError:
    _darcy_core = None


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--points", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    grid = Grid(args.points)
    u = sample_batch(forcing_field(grid), np.random.default_rng(args.seed), args.samples)
    t_py, (psi_py, it_py, _, _) = best_of(lambda: _darcy_py.solve_batch(u), args.repeat)
    print(f"numpy   {args.samples} solves, n={args.points}: {t_py * 1e3:9.2f} ms "
          f"({t_py / args.samples * 1e6:.1f} us/solve, mean {it_py.mean():.2f} Newton steps)")
    if _darcy_core is None:
        print("cython  extension not built; skipping")
        return
    t_cy, (psi_cy, _, _, _) = best_of(lambda: _darcy_core.solve_batch(u), args.repeat)
    print(f"cython  {args.samples} solves, n={args.points}: {t_cy * 1e3:9.2f} ms "
          f"({t_cy / args.samples * 1e6:.1f} us/solve)")
    print(f"speedup {t_py / t_cy:.1f}x, max |psi_cy - psi_py| = "
          f"{np.max(np.abs(np.asarray(psi_cy) - psi_py)):.3g}")


if __name__ == "__main__":
    main()

"""Time the compiled kernels against their pure-Python twins.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--length 2000]

Prints one row per kernel with the best-of-N wall time for each backend
and the speedup. Results from both backends are checked for equality
before timing.
"""

import argparse
import sys
import timeit

import numpy as np

from opdkit import _pykernels

try:
    from opdkit import _ckernels
except ImportError:
    sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")


def cases(length, dtw_length, rng):
    walk = np.clip(np.cumsum(rng.normal(0.002, 0.03, length)), 0, 1)
    a = rng.random(dtw_length)
    b = rng.random(dtw_length + dtw_length // 3)
    return {
        "running_max": (walk,),
        "total_variation": (walk,),
        "regret_sum": (walk,),
        "regression_mass": (walk,),
        "count_small_steps": (walk, 0.0364),
        "count_rises": (walk, 0.05),
        "dtw_distance": (a, b),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--length", type=int, default=2000, help="trace length for the 1-D kernels")
    ap.add_argument("--dtw-length", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<20}{'python (ms)':>14}{'cython (ms)':>14}{'speedup':>10}")
    for name, call_args in cases(args.length, args.dtw_length, rng).items():
        py, cy = getattr(_pykernels, name), getattr(_ckernels, name)
        want, got = py(*call_args), cy(*call_args)
        if not np.array_equal(np.asarray(want), np.asarray(got)):
            sys.exit(f"{name}: backends disagree")
        n = 3 if name == "dtw_distance" else 20
        t_py = min(timeit.repeat(lambda: py(*call_args), number=n, repeat=args.repeat)) / n
        t_cy = min(timeit.repeat(lambda: cy(*call_args), number=n, repeat=args.repeat)) / n
        print(f"{name:<20}{t_py * 1e3:>14.3f}{t_cy * 1e3:>14.4f}{t_py / t_cy:>9.0f}x")


if __name__ == "__main__":
    main()

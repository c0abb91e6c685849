"""Time the compiled Monte Carlo kernel against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--trials N] [--repeat R]``.
Both backends consume the same counter-based stream, so the script also
checks that their integer sums agree before reporting timings.
"""

import argparse
import time

from moe_energy_sim import _kernels_py

try:
    from moe_energy_sim import _kernels
except ImportError:
    _kernels = None

# (n_ex, top_k, batch, n_gpus)
CASES = [
    (8, 2, 1, 4),
    (8, 2, 1024, 4),
    (256, 8, 1, 32),
    (256, 8, 64, 32),
    (256, 8, 1024, 32),
    (128, 1, 256, 16),
]


def best_time(fn, args, repeat):
    best = float("inf")
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, result


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--trials", type=int, default=2000)
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)

    if _kernels is None:
        print("compiled kernel not built; timing the numpy fallback only")
    print(f"{'case':<22}{'numpy s':>10}{'cython s':>10}{'speedup':>9}")
    for case in CASES:
        call = (*case, args.seed, args.trials)
        t_py, r_py = best_time(_kernels_py.sample_sums, call, args.repeat)
        if _kernels is None:
            print(f"{str(case):<22}{t_py:>10.4f}{'-':>10}{'-':>9}")
            continue
        t_c, r_c = best_time(_kernels.sample_sums, call, args.repeat)
        if tuple(r_c) != tuple(r_py):
            raise SystemExit(f"backends disagree on {case}: {r_c} vs {r_py}")
        print(f"{str(case):<22}{t_py:>10.4f}{t_c:>10.4f}{t_py / t_c:>8.1f}x")


if __name__ == "__main__":
    main()

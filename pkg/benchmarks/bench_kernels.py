"""Time the routing kernels on the numba and numpy paths.

    python benchmarks/bench_kernels.py [--rows 65536] [--experts 16] [--k 2] [--repeat 20]

Each kernel is checked for identical output on both paths before timing.
"""

import argparse
import time

import numpy as np

from ditmoe import _accel


def _time(fn, repeat):
    fn()  # warm-up (triggers JIT compilation on the numba path)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--rows", type=int, default=65536, help="routed tokens")
    ap.add_argument("--experts", type=int, default=16)
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--layers", type=int, default=12)
    ap.add_argument("--groups", type=int, default=250)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not _accel.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(args.seed)
    logits = rng.standard_normal((args.rows, args.experts))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    selected = np.argsort(-probs, axis=1)[:, : args.k]
    groups = rng.integers(0, args.groups, args.rows)
    layers = rng.integers(0, args.layers, args.rows)

    def accumulate():
        counts = np.zeros((args.layers, args.groups, args.experts), dtype=np.int64)
        _accel.accumulate_counts(counts, layers, groups, selected)
        return counts

    kernels = {
        "topk_rows": lambda: _accel.topk_rows(probs, args.k),
        "group_counts": lambda: _accel.group_counts(selected, groups, args.groups, args.experts),
        "accumulate_counts": accumulate,
    }
    print(f"rows={args.rows} experts={args.experts} k={args.k} repeat={args.repeat} (best of)")
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in kernels.items():
        _accel.use_numba(False)
        ref = fn()
        t_np = _time(fn, args.repeat)
        _accel.use_numba(True)
        got = fn()
        t_nb = _time(fn, args.repeat)
        if not np.array_equal(ref, got):
            raise SystemExit(f"{name}: numba and numpy paths disagree")
        print(f"{name:<20}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()

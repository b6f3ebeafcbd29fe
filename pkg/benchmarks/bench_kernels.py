"""Time the numpy and numba kernels side by side.

    python benchmarks/bench_kernels.py [--repeat 20] [--sizes 200,2000,20000]

The numba column is skipped when numba is not installed. Each timing is the
median of ``--repeat`` calls after one warm-up call (which absorbs JIT cost).
"""
from __future__ import annotations

import argparse
import statistics
import timeit

import numpy as np

from unlearn_lab import kernels

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def _inputs(m, C=3, d=16, seed=0):
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((C, d + 1))
    Z = np.hstack([rng.standard_normal((m, d)), np.ones((m, 1))])
    y = rng.integers(0, C, size=m).astype(np.int64)
    w = np.full(m, 1.0 / m)
    return theta, Z, y, w


CASES = {
    "softmax_probs": lambda t, Z, y, w: (t, Z),
    "weighted_ce_grad": lambda t, Z, y, w: (t, Z, y, w),
    "softmax_hessian": lambda t, Z, y, w: (t, Z, w),
    "per_sample_grads": lambda t, Z, y, w: (t, Z, y),
}


def _median_time(fn, args, repeat):
    fn(*args)
    return statistics.median(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--sizes", default="200,2000,20000")
    args = ap.parse_args(argv)
    print(f"{'kernel':<18} {'m':>7} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for m in (int(s) for s in args.sizes.split(",")):
        inputs = _inputs(m)
        for name, pick in CASES.items():
            a = pick(*inputs)
            f_np = getattr(kernels, f"{name}_np")
            t_np = _median_time(f_np, a, args.repeat) * 1e3
            if HAVE_NUMBA:
                f_nb = getattr(kernels, f"{name}_nb")
                t_nb = _median_time(f_nb, a, args.repeat) * 1e3
                r_np, r_nb = f_np(*a), f_nb(*a)
                r_np = r_np[0] if isinstance(r_np, tuple) else r_np
                r_nb = r_nb[0] if isinstance(r_nb, tuple) else r_nb
                diff = float(np.abs(np.asarray(r_np) - np.asarray(r_nb)).max())
                print(f"{name:<18} {m:>7} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>8.2f} {diff:>11.1e}")
            else:
                print(f"{name:<18} {m:>7} {t_np:>10.3f} {'-':>10} {'-':>8} {'-':>11}")


if __name__ == "__main__":
    main()

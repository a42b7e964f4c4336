"""Compare the compiled selection kernels against the numpy fallback.

Times kth_abs_value (flat) and row_kth_abs_value (per row) on sizes that
bracket the tensors the compression path actually sees.  Both backends are
imported directly, so one invocation reports both regardless of which one
the package selected at import.

    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from dctsim.kernels import BACKEND, _numpy

try:
    from dctsim.kernels import _select
except ImportError:
    _select = None

FLAT_SIZES = (1_000, 10_000, 100_000, 1_000_000, 5_000_000)
ROW_SHAPES = ((256, 512), (256, 5120), (1024, 1024))


def _time(fn, *args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repeats per case, best-of (default 5)")
    args = ap.parse_args()

    rng = np.random.Generator(np.random.PCG64(0))
    print(f"package backend at import: {BACKEND}")
    if _select is None:
        print("compiled extension not built; timing the numpy fallback only")

    print(f"\n{'case':>24} {'numpy':>12} {'compiled':>12} {'speedup':>9}")
    for n in FLAT_SIZES:
        x = rng.standard_normal(n)
        k = max(1, int(n * 0.95))
        t_np = _time(_numpy.kth_abs_value, x, k, repeats=args.repeats)
        if _select is not None:
            t_c = _time(_select.kth_abs_value, x, k, repeats=args.repeats)
            assert _select.kth_abs_value(x, k) == _numpy.kth_abs_value(x, k)
            print(f"{'flat n=%d' % n:>24} {t_np * 1e3:>10.3f}ms "
                  f"{t_c * 1e3:>10.3f}ms {t_np / t_c:>8.2f}x")
        else:
            print(f"{'flat n=%d' % n:>24} {t_np * 1e3:>10.3f}ms {'-':>12} {'-':>9}")

    for b, d in ROW_SHAPES:
        x = rng.standard_normal((b, d))
        k = max(1, int(d * 0.95))
        t_np = _time(_numpy.row_kth_abs_value, x, k, repeats=args.repeats)
        case = f"rows {b}x{d}"
        if _select is not None:
            t_c = _time(_select.row_kth_abs_value, x, k, repeats=args.repeats)
            assert np.array_equal(_select.row_kth_abs_value(x, k),
                                  _numpy.row_kth_abs_value(x, k))
            print(f"{case:>24} {t_np * 1e3:>10.3f}ms "
                  f"{t_c * 1e3:>10.3f}ms {t_np / t_c:>8.2f}x")
        else:
            print(f"{case:>24} {t_np * 1e3:>10.3f}ms {'-':>12} {'-':>9}")


if __name__ == "__main__":
    main()

"""Time the numba kernels against their numpy fallbacks.

    python bench/bench_kernels.py [--repeat N]

With KORORA_NO_NUMBA=1 both columns run the numpy path.
"""

import argparse
import timeit

import numpy as np

from korora import _kernels


def inputs(seed=0):
    rng = np.random.default_rng(seed)
    n = 200_000
    access = (
        rng.integers(1, 6, n).astype(np.int8),
        rng.integers(0, 8, n).astype(np.int64),
        rng.integers(1, 6, n).astype(np.int8),
        rng.integers(0, 8, n).astype(np.int64),
        rng.integers(0, 4, n).astype(np.int8),
        rng.integers(0, 16, n).astype(np.int64),
    )
    a = rng.integers(0, 256, (4096, 512), dtype=np.uint8)
    b = a.copy()
    b[rng.integers(0, 4096, 300), rng.integers(0, 512, 300)] ^= 1
    reads = rng.integers(0, 4096, 100_000)
    return access, (a, b), reads


def cases(k, access, pair, reads):
    return {
        "access_codes": lambda: k["access_codes"](*access),
        "changed_chunks": lambda: k["changed_chunks"](*pair),
        "route_reads": lambda: k["route_reads"](
            reads, np.zeros(4096, np.int64), np.zeros(4096, np.bool_), 3
        ),
    }


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()

    access, pair, reads = inputs()
    active = {
        "access_codes": _kernels.access_codes,
        "changed_chunks": _kernels.changed_chunks,
        "route_reads": _kernels.route_reads,
    }
    fast = cases(active, access, pair, reads)
    slow = cases(_kernels.numpy_kernels(), access, pair, reads)
    for fn in fast.values():
        fn()  # compile outside the timed region

    print(f"backend={_kernels.BACKEND}")
    print(f"{'kernel':<16} {'active ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name in fast:
        t_fast = min(timeit.repeat(fast[name], number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(slow[name], number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16} {t_fast:>10.2f} {t_slow:>10.2f} {t_slow / t_fast:>7.1f}x")


if __name__ == "__main__":
    main()

"""Compare the compiled and pure-Python FNV-1a kernels.

Usage: python3 benchmarks/bench_kernels.py [--sizes 1024,65536,1048576] [--repeat 3]
"""

import argparse
import timeit

import numpy as np

from vidcolor import _kernels_py, kernels


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="1024,65536,1048576", help="comma-separated payload sizes in bytes")
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)
    try:
        from vidcolor import _kernels as compiled
    except ImportError:
        compiled = None
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'bytes':>10} {'python s':>10} {'cython s':>10} {'speedup':>8}")
    rng = np.random.default_rng(0)
    for size in (int(s) for s in args.sizes.split(",")):
        data = rng.integers(0, 256, size, dtype=np.uint8).tobytes()
        py = min(timeit.repeat(lambda: _kernels_py.fnv1a64(data), number=1, repeat=args.repeat))
        if compiled is None:
            print(f"{size:>10} {py:>10.4f} {'n/a':>10} {'n/a':>8}")
            continue
        view = memoryview(data).cast("B")
        cy = min(timeit.repeat(lambda: compiled.fnv1a64(view, _kernels_py.FNV_OFFSET), number=1, repeat=args.repeat))
        assert compiled.fnv1a64(view, _kernels_py.FNV_OFFSET) == _kernels_py.fnv1a64(data)
        print(f"{size:>10} {py:>10.4f} {cy:>10.6f} {py / cy:>7.0f}x")


if __name__ == "__main__":
    main()

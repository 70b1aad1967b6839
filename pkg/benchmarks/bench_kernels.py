"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, so one process times both and also
checks that their outputs agree bit for bit.
"""
import argparse
import timeit

import numpy as np

from segcompress import _kernels_py

try:
    from segcompress import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    x = rng.standard_normal((8, 16, 64, 64)).astype(np.float32)
    x2 = rng.standard_normal((8, 32, 32, 32)).astype(np.float32)
    cols = rng.standard_normal((8, 16 * 9, 32 * 32)).astype(np.float32)
    a = rng.integers(0, 256, (256, 512), dtype=np.uint8)
    b = rng.integers(0, 256, (512, 256), dtype=np.uint8)
    return {
        "im2col 8x16x64x64 k3 s1": lambda k: k.im2col(x, 3, 3, 1, 1, 1),
        "im2col 8x32x32x32 k3 s1": lambda k: k.im2col(x2, 3, 3, 1, 1, 1),
        "col2im 8x16x64x64 k3 s2": lambda k: k.col2im(cols, (8, 16, 64, 64), 3, 3, 2, 0, 1),
        "int_matmul_u8 256x512x256": lambda k: k.int_matmul_u8(a, 128, b, 120),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not built; only the numpy backend is available")
    backends = [("numpy", _kernels_py)] + ([("cython", _kernels)] if _kernels else [])
    print(f"{'kernel':<28}" + "".join(f"{name:>12}" for name, _ in backends) + ("   speedup  identical" if _kernels else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        times = []
        for _, mod in backends:
            fn(mod)
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3)
        line = f"{label:<28}" + "".join(f"{t:>10.2f}ms" for t in times)
        if _kernels:
            same = np.array_equal(fn(_kernels_py), fn(_kernels))
            line += f"   {times[0] / times[1]:>6.2f}x  {same}"
        print(line)


if __name__ == "__main__":
    main()

"""Time the numba and numpy kernel paths on the shapes a desk-scale step uses.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints the median wall time per call for each kernel and path, and the
speedup of numba over numpy.
"""

import argparse
import statistics
import time

import numpy as np

from msrn import kernels

SHAPES = [
    # (batch, height, width, c_in, c_out): the four backbone blocks at batch 8
    (8, 32, 32, 3, 8),
    (8, 16, 16, 8, 16),
    (8, 8, 8, 16, 16),
    (8, 4, 4, 16, 16),
]


def median_time(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def bench(path, repeat):
    rng = np.random.default_rng(0)
    rows = {}
    for n, h, w, ci, co in SHAPES:
        x = rng.normal(size=(n, h, w, ci))
        k = rng.normal(size=(3, 3, ci, co))
        g = rng.normal(size=(n, h, w, co))
        y, arg = path.maxpool2_forward(g)
        gy = rng.normal(size=y.shape)
        tag = f"{h}x{w}x{ci}->{co}"
        rows[f"conv fwd {tag}"] = median_time(lambda: path.conv3x3_forward(x, k), repeat)
        rows[f"conv bwd {tag}"] = median_time(lambda: path.conv3x3_backward(x, k, g), repeat)
        rows[f"pool fwd {tag}"] = median_time(lambda: path.maxpool2_forward(g), repeat)
        rows[f"pool bwd {tag}"] = median_time(lambda: path.maxpool2_backward(arg, gy, g.shape), repeat)
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    base = bench(kernels.numpy_kernels, args.repeat)
    if kernels.numba_kernels is None:
        print("numba not importable; numpy timings only")
        fast = {}
    else:
        fast = bench(kernels.numba_kernels, args.repeat)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, t in base.items():
        if name in fast:
            print(f"{name:32s} {1e3 * t:10.3f} {1e3 * fast[name]:10.3f} {t / fast[name]:8.2f}")
        else:
            print(f"{name:32s} {1e3 * t:10.3f}")
    if fast:
        print(f"{'total':32s} {1e3 * sum(base.values()):10.3f} {1e3 * sum(fast.values()):10.3f} "
              f"{sum(base.values()) / sum(fast.values()):8.2f}")


if __name__ == "__main__":
    main()

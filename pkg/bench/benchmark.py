"""Time the compiled kernels against the pure-Python fallback.

    python3 bench/benchmark.py [--size 256] [--repeat 3]

Prints one row per workload with the best-of-N time for each backend and the
speedup, and checks that both backends return bitwise-identical arrays.
"""

import argparse
import time

import numpy as np

from otop import kernels, lowering, mscnn
from otop.raster import Raster


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def workloads(size, rng):
    x16 = rng.normal(size=(16, size, size)).astype(np.float32)
    w = rng.normal(size=(16, 16, 3, 3)).astype(np.float32)
    b = rng.normal(size=16).astype(np.float32)
    small = rng.normal(size=(16, size // 4, size // 4)).astype(np.float32)
    params = mscnn.init_params(mscnn.NetworkConfig(3, (8, 12, 16)), 0)
    image = Raster(rng.uniform(0, 1, (6, size, size)).astype(np.float32))
    graph = lowering.lower(mscnn.init_params(mscnn.NetworkConfig(2, (4, 4)), 0))
    return [
        (f"conv3x3 16->16 @{size}", lambda: kernels.conv3x3(x16, w, b)),
        (f"block_max2 16ch @{size}", lambda: kernels.block_max2(x16)),
        (f"bilinear_up x4 16ch @{size // 4}", lambda: kernels.bilinear_up(small, 4)),
        (f"forward 3 scales [8,12,16] @{size}", lambda: mscnn.forward(params, image).prob.data),
        (f"faithful graph 2 scales [4,4] @{size}", lambda: lowering.execute_graph(graph, image).prob.data),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if kernels.BACKEND != "compiled":
        raise SystemExit("compiled extension not built; run `pip install --no-build-isolation -e .` first")
    rng = np.random.default_rng(0)
    print(f"{'workload':40s} {'compiled s':>11s} {'python s':>10s} {'speedup':>8s} identical")
    for name, fn in workloads(args.size, rng):
        kernels.set_backend("compiled")
        tc, oc = best_of(fn, args.repeat)
        kernels.set_backend("python")
        tp, op = best_of(fn, args.repeat)
        kernels.set_backend("compiled")
        print(f"{name:40s} {tc:11.4f} {tp:10.4f} {tp / tc:8.2f} {np.array_equal(oc, op)}")


if __name__ == "__main__":
    main()

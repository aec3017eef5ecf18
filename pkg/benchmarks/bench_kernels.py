"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-N time per call for each kernel under both backends and
the speedup. Exits with an error if the compiled extension is not built.
"""

import argparse
import sys
import timeit

import numpy as np

from refinelab import _kernels_py as pure

try:
    from refinelab import _kernels as fast
except ImportError:
    sys.exit("compiled kernels not built; run `pip install -e . --no-build-isolation` first")


def cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(25, 64, 8, 8)).astype(np.float32)
    cols = pure.im2col(x, 3, 3, 1, 1)
    big = rng.normal(size=(64, 16, 32, 32)).astype(np.float32)
    _, arg = pure.maxpool2x2_forward(big)
    g_pool = rng.normal(size=(64, 16, 16, 16)).astype(np.float32)
    gamma, beta = np.ones(64, np.float32), np.zeros(64, np.float32)
    _, xhat, _, _, inv = pure.bn_train_forward(x, gamma, beta, 1e-5)
    g = rng.normal(size=x.shape).astype(np.float32)
    state = np.array([1, 2, 3, 4], dtype=np.uint64)
    return {
        "xoshiro_fill(4096)": lambda k: k.xoshiro_fill(state, 4096),
        "im2col 25x64x8x8 k3": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im 25x64x8x8 k3": lambda k: k.col2im(cols, 25, 64, 8, 8, 3, 3, 1, 1),
        "maxpool fwd 64x16x32x32": lambda k: k.maxpool2x2_forward(big),
        "maxpool bwd 64x16x32x32": lambda k: k.maxpool2x2_backward(g_pool, arg, 32, 32),
        "bn train fwd 25x64x8x8": lambda k: k.bn_train_forward(x, gamma, beta, 1e-5),
        "bn backward 25x64x8x8": lambda k: k.bn_backward(g, xhat, gamma, inv, True, True),
    }


def best(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':28s} {'python':>11s} {'cython':>11s} {'speedup':>8s}")
    for name, call in cases().items():
        tp = best(lambda: call(pure), args.repeat)
        tc = best(lambda: call(fast), args.repeat)
        print(f"{name:28s} {tp * 1e3:9.3f}ms {tc * 1e3:9.3f}ms {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()

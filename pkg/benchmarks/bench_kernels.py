"""Time the compiled bilinear gather/scatter against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes cover the toy configuration and a full-width one (N=256 queries,
C=256, M=8 heads, K=4 samples, a 64x64 level).
"""

import argparse
import timeit

import numpy as np

from demf import kernels

CASES = {
    "toy (N=32, M=4, K=2, 32x32, D=8)": (32, 32, 4, 2, 8, 32),
    "toy level 2 (16x16)": (16, 16, 4, 2, 8, 32),
    "full-width (N=256, M=8, K=4, 64x64, D=32)": (64, 64, 8, 4, 32, 256),
}


def make_case(H, W, M, K, D, N, seed=0):
    rng = np.random.default_rng(seed)
    value = rng.normal(size=(H, W, M, D))
    loc = rng.uniform(-0.1, 1.1, size=(N, M, K, 2))
    grad = rng.normal(size=(N, M, K, D))
    return value, loc, grad


def best_of(fn, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = [("python", kernels.python_backend)]
    if kernels.compiled_backend is not None:
        backends.append(("cython", kernels.compiled_backend))
    else:
        print("compiled backend not built; timing the fallback only")
    print(f"{'case':44s} {'op':9s} " + " ".join(f"{name:>12s}" for name, _ in backends) + "   speedup")
    for label, shape in CASES.items():
        value, loc, grad = make_case(*shape)
        for op in ("forward", "backward"):
            times = []
            for _, mod in backends:
                if op == "forward":
                    times.append(best_of(lambda: mod.sample_forward(value, loc), args.repeat))
                else:
                    times.append(best_of(lambda: mod.sample_backward(value, loc, grad), args.repeat))
            cells = " ".join(f"{t * 1e6:10.1f}us" for t in times)
            speedup = f"{times[0] / times[-1]:8.1f}x" if len(times) > 1 else ""
            print(f"{label:44s} {op:9s} {cells} {speedup}")


if __name__ == "__main__":
    main()

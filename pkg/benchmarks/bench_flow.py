"""Compare the compiled and pure-Python block-matching kernels.

    python benchmarks/bench_flow.py [--sizes 32 64 128] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from vctransfer import motion


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128])
    ap.add_argument("--block", type=int, default=4)
    ap.add_argument("--radius", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    backends = motion.available_backends()
    print(f"default backend: {motion.BACKEND}; available: {', '.join(backends)}")
    print(f"{'size':>6}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}")
    rng = np.random.default_rng(0)
    for n in args.sizes:
        a = rng.integers(0, 256, size=(n, n, 3))
        b = np.roll(a, (1, 2), axis=(0, 1))
        results, times = {}, {}
        for be in backends:
            results[be] = motion.block_match(a, b, args.block, args.radius, backend=be)
            t = timeit.repeat(lambda: motion.block_match(a, b, args.block, args.radius, backend=be),
                              number=1, repeat=args.repeat)
            times[be] = 1000 * min(t)
        if len(backends) > 1 and not np.array_equal(results["python"], results["cython"]):
            raise SystemExit(f"backends disagree at size {n}")
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{n:>6}" + "".join(f"{times[be]:>14.2f}" for be in backends) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()

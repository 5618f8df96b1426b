"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

The same inputs go through both paths; outputs are compared before timing.
"""

import argparse
import timeit

import numpy as np

from nesydm import kernels
from nesydm._accel import HAVE_NUMBA
from nesydm.diffusion import make_rng


def cases(rng):
    costs = rng.choice([0.8, 1.2, 5.3, 7.7, 9.2], size=(256, 144))
    probs = rng.random((1024, 16, 2, 10))
    probs /= probs.sum(-1, keepdims=True)
    u = rng.random(probs.shape[:-1])
    samples = rng.integers(0, 10, size=(16, 1024, 4))
    coef = rng.normal(size=(16, 1024))
    return {
        "dijkstra_batch 256 x 12x12": lambda nb: kernels.dijkstra_batch(costs, 12, True, use_numba=nb),
        "categorical_sample 1024x16x2, V=10": lambda nb: kernels.categorical_sample(probs, u, use_numba=nb),
        "weighted_onehot_sum 16x1024x4, V=10": lambda nb: kernels.weighted_onehot_sum(samples, coef, 10, use_numba=nb),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
    rng = make_rng(0)
    print(f"{'kernel':<38} {'numpy ms':>10} {'numba ms':>10} {'speed-up':>9}")
    for name, fn in cases(rng).items():
        ref = fn(False)
        t_np = min(timeit.repeat(lambda: fn(False), number=1, repeat=args.repeat)) * 1e3
        if HAVE_NUMBA:
            np.testing.assert_allclose(fn(True), ref, rtol=1e-12, atol=1e-12)
            t_nb = min(timeit.repeat(lambda: fn(True), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<38} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>8.1f}x")
        else:
            print(f"{name:<38} {t_np:>10.2f} {'-':>10} {'-':>9}")


if __name__ == "__main__":
    main()

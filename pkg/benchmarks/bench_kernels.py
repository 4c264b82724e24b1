"""Cython kernels vs the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Times the conv forward/backward pair, the rank computation and one TinyCNN
training epoch on each backend, and checks both backends agree.
"""
import argparse
import json
import timeit

import numpy as np

from adaptune import _pykernels, kernels
from adaptune.control import Learner, ModelSpec, TrainLoopConfig
from adaptune.dataio import make_synthetic, stratified_split
from adaptune.modelcore import SeededRng

try:
    from adaptune import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_cases(rng):
    x = rng.normal(size=(64, 1, 12, 12))
    w = rng.normal(size=(8, 1, 3, 3))
    dout = rng.normal(size=(64, 8, 10, 10))
    probs = rng.dirichlet(np.ones(100), size=5000)
    labels = rng.integers(0, 100, size=5000)
    return {
        "conv2d_forward [64x1x12x12, 8 filters]": lambda m: m.conv2d_forward(x, w),
        "conv2d_backward": lambda m: m.conv2d_backward(x, w, dout),
        "true_class_ranks [5000 x 100]": lambda m: m.true_class_ranks(probs, labels),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", metavar="PATH")
    args = parser.parse_args()
    if _ckernels is None:
        parser.exit(1, "compiled extension not built; run `pip install -e . --no-build-isolation`\n")

    rng = SeededRng(0)
    backends = {"cython": _ckernels, "python": _pykernels}
    rows = []
    for name, fn in kernel_cases(rng).items():
        a, b = fn(_ckernels), fn(_pykernels)
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)
        times = {k: best_of(lambda m=m: fn(m), args.repeat, 5) for k, m in backends.items()}
        rows.append((name, times))

    saved = kernels._impl
    try:
        times = {}
        for k, m in backends.items():
            kernels._impl = m
            ds = make_synthetic("gaussian_blobs", 4, 144, 100, seed=0, image_side=12)
            tr, va = stratified_split(ds, 0.8, 0)
            learner = Learner(tr, va, TrainLoopConfig(batch_size=32), 0, ModelSpec("cnn", channels=8))
            times[k] = best_of(lambda: learner.train_epoch(0.01), args.repeat, 1)
        rows.append(("TinyCNN epoch [320 images 12x12]", times))
    finally:
        kernels._impl = saved

    print(f"{'case':<42}{'cython ms':>12}{'python ms':>12}{'speedup':>10}")
    for name, t in rows:
        print(f"{name:<42}{1e3 * t['cython']:12.3f}{1e3 * t['python']:12.3f}{t['python'] / t['cython']:9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([{"case": n, **t} for n, t in rows], fh, indent=2)


if __name__ == "__main__":
    main()

"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel with the best-of-N time for each backend, the
speedup, and whether the two outputs agree.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from vitdae import _kernels


def cases(rng: np.random.Generator):
    xp = rng.standard_normal((32, 32, 18, 18))
    cols = _kernels.im2col(xp, 3, 3, 1, impl=_kernels.implementations()["python"])
    pts = rng.standard_normal((1000, 32))
    gen = rng.standard_normal((1000, 32)) * 1.1
    radii = _kernels.knn_sq_radii(pts, 3, impl=_kernels.implementations()["python"])
    return {
        "im2col 32x32x18x18 k3": lambda impl: _kernels.im2col(xp, 3, 3, 1, impl=impl),
        "col2im 32x32x18x18 k3": lambda impl: _kernels.col2im(cols, xp.shape, 3, 3, 1, impl=impl),
        "knn radii n=1000 D=32": lambda impl: _kernels.knn_sq_radii(pts, 3, impl=impl),
        "ball membership 1000x1000": lambda impl: _kernels.in_any_ball(gen, pts, radii, impl=impl),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    impls = _kernels.implementations()
    print(f"default backend: {_kernels.BACKEND}; available: {', '.join(impls)}")
    header = f"{'kernel':28s}" + "".join(f"{name + ' ms':>12s}" for name in impls) + f"{'speedup':>10s}  agree"
    print(header)
    for name, fn in cases(np.random.default_rng(0)).items():
        times, outs = {}, {}
        for backend, impl in impls.items():
            outs[backend] = fn(impl)
            times[backend] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) * 1e3
        ref = outs["python"]
        agree = all(np.allclose(o, ref, rtol=1e-12, atol=1e-12) for o in outs.values())
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:28s}" + "".join(f"{times[b]:12.2f}" for b in impls) + f"{speed:9.1f}x  {agree}")


if __name__ == "__main__":
    main()

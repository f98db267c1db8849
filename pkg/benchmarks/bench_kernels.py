"""Time each kernel family under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 32]

Prints one row per kernel with the best wall time of each backend and the
speedup of numba over numpy.  The first numba call (compilation or cache
load) is excluded.  Outputs are compared so a mismatch shows up here too.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from anisoseg._backend import use_backend
from anisoseg.kernels.conv import conv3d_backward, conv3d_forward
from anisoseg.kernels.edt import squared_edt
from anisoseg.kernels.label import label_components
from anisoseg.kernels.pool import maxpool3d_backward, maxpool3d_forward


def cases(size: int, rng: np.random.Generator):
    x = rng.standard_normal((1, 8, size, size, size // 4))
    w = rng.standard_normal((8, 8, 3, 3, 3))
    b = rng.standard_normal(8)
    g = rng.standard_normal(x.shape)
    _, arg = maxpool3d_forward(x, (2, 2, 1))
    gp = rng.standard_normal(arg.shape)
    sites = rng.random((size, size, size)) < 0.05
    blobs = rng.random((size, size, size)) < 0.3
    return {
        "conv3d_forward": lambda: conv3d_forward(x, w, b),
        "conv3d_backward": lambda: conv3d_backward(x, w, g),
        "maxpool3d_forward": lambda: maxpool3d_forward(x, (2, 2, 1)),
        "maxpool3d_backward": lambda: maxpool3d_backward(gp, arg, (2, 2, 1)),
        "squared_edt": lambda: squared_edt(sites, (0.5, 0.5, 2.0)),
        "label_components": lambda: label_components(blobs, 26),
    }


def best_time(fn, repeat: int) -> tuple[float, object]:
    out = fn()  # warm-up, includes jit compilation
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-10)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=32)
    args = ap.parse_args(argv)
    fns = cases(args.size, np.random.default_rng(0))
    print(f"{'kernel':<20} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}  match")
    for name, fn in fns.items():
        with use_backend("numba"):
            t_nb, out_nb = best_time(fn, args.repeat)
        with use_backend("numpy"):
            t_np, out_np = best_time(fn, args.repeat)
        print(f"{name:<20} {1e3 * t_nb:10.2f} {1e3 * t_np:10.2f} {t_np / t_nb:8.2f}  {same(out_nb, out_np)}")


if __name__ == "__main__":
    main()

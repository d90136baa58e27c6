"""Compiled versus numpy kernel timings.

Run with ``python benchmarks/bench_kernels.py``; prints the best of several
repeats per kernel and the speed-up of the compiled extension.
"""
import argparse
import timeit

import numpy as np

from kylelab import _fallback
from kylelab.core import CH_W, brownian_increments, make_grid
from kylelab.dist import LognormalMixture
from kylelab.rfield import RField, gaussian_panels
from kylelab.vol import volterra_weights

try:
    from kylelab import _kernels as compiled
except ImportError:  # pragma: no cover - depends on the build
    compiled = None


def cases():
    rf = RField(LognormalMixture((1.0, 1.0, 1.0), (0.2, 0.5, 0.9), (0.3, 0.4, 0.3)))
    x = np.linspace(-6, 6, 200_000)
    z, w = gaussian_panels(64)
    xi = np.linspace(-3, 3, 5000)
    su = np.full(xi.size, 0.7)
    g = make_grid(500)
    dW = brownian_increments(g, 0, CH_W, np.arange(2000))
    gv = make_grid(400)
    dWv = brownian_increments(gv, 0, CH_W, np.arange(100))
    K1, K2 = volterra_weights(gv, 0.1)
    t = np.linspace(0, 1, 201)
    X = np.cumsum(dW[:20, :201], axis=1)
    wt = np.full(t.size, 1.0 / t.size)
    return {
        "transport_h (2e5 points)": lambda m: m.transport_h(*rf._args, x),
        "gh_moments (5000 x 256 nodes)": lambda m: m.gh_moments(*rf._args, xi, su, z, w),
        "cir_euler (2000 x 500)": lambda m: m.cir_euler(0.25, 0.5, 1.0, 1.0, g.dt, dW),
        "volterra_cir (100 x 400)": lambda m: m.volterra_cir(0.25, 0.5, 1.0, 1.0, 2.0, K1, K2, dWv),
        "holder_pairs (20 x 201)": lambda m: m.holder_pairs(t, X, wt, 0.5, 1.0, 0.3),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; timing numpy only")
    print(f"{'kernel':34s} {'numpy [ms]':>11s} {'compiled [ms]':>14s} {'speed-up':>9s}")
    for name, fn in cases().items():
        t_np = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:34s} {t_np:11.2f}")
            continue
        t_c = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:34s} {t_np:11.2f} {t_c:14.2f} {t_np / t_c:8.1f}x")


if __name__ == "__main__":
    main()

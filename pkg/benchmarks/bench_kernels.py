"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Times the EM fit on a full 4096-value queue and a 64-point ratio scan on a
1024-bin grid, which are the two calls made at every threshold update.
"""
import argparse
import timeit

import numpy as np

from ogclab import _pykernels

try:
    from ogclab import _ckernels
except ImportError:
    _ckernels = None


def inputs(seed=0):
    rng = np.random.default_rng(seed)
    x = np.abs(np.concatenate([rng.normal(0.4, 0.2, 2458), rng.normal(2.5, 0.8, 1638)]))
    em_args = (x, np.quantile(x, [0.25, 0.75]), np.full(2, x.var()), np.array([0.5, 0.5]), 100, 1e-6, 1e-4)
    h = np.linspace(x.min(), x.max(), 1024)
    g = np.exp(h)
    wc = np.exp(-0.5 * ((h - 0.4) / 0.2) ** 2)
    wn = np.exp(-0.5 * ((h - 2.5) / 0.8) ** 2)
    taus = np.exp(np.linspace(0, h[-1], 64))
    return em_args, (g, wc, wn, taus)


def bench(fn, args, repeat):
    timer = timeit.Timer(lambda: fn(*args))
    n, _ = timer.autorange()
    best = min(timer.repeat(repeat, n)) / n
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    em_args, ratio_args = inputs()
    rows = [("em_fit (4096 values)", "em_fit", em_args), ("clipped_ratios (64 tau x 1024 bins)", "clipped_ratios", ratio_args)]
    print(f"{'kernel':<38}{'numpy':>12}{'cython':>12}{'speedup':>10}")
    for label, name, a in rows:
        t_py = bench(getattr(_pykernels, name), a, args.repeat)
        if _ckernels is None:
            print(f"{label:<38}{t_py * 1e3:>10.3f}ms{'n/a':>12}{'':>10}")
            continue
        t_c = bench(getattr(_ckernels, name), a, args.repeat)
        print(f"{label:<38}{t_py * 1e3:>10.3f}ms{t_c * 1e3:>10.3f}ms{t_py / t_c:>9.1f}x")
    n_iter = _pykernels.em_fit(*em_args)[4]
    print(f"(EM ran {n_iter} iterations on this input)")


if __name__ == "__main__":
    main()

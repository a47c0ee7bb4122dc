"""Compare the compiled and numpy kernel backends.

Times the deterministic matmul and the tensor-train forward/backward over all
``2^n`` patterns for a few view counts, and checks that both backends agree
bit for bit. Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from ttprompt import kernels


def cases(rng: np.random.Generator):
    for m, k, n in [(64, 4, 64), (128, 4, 1024), (128, 64, 128)]:
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        yield f"matmul {m}x{k} @ {k}x{n}", lambda a=a, b=b: kernels.matmul(a, b)
    for n_views, R, k in [(6, 2, 4), (10, 4, 4), (14, 8, 8)]:
        ranks = [1] + [R] * n_views
        cores = [rng.normal(size=(2, ranks[l], ranks[l + 1])) for l in range(n_views)]
        packed, rk = kernels.pack_cores(cores, ranks)
        term = rng.normal(size=(R, k))
        pats = np.arange(1, 1 << n_views, dtype=np.int64)
        dbeta = rng.normal(size=(pats.size, k))
        yield (f"tt_forward n={n_views} R={R} P={pats.size}",
               lambda p=packed, r=rk, t=term, q=pats: kernels.tt_forward(p, r, t, q))
        yield (f"tt_backward n={n_views} R={R} P={pats.size}",
               lambda p=packed, r=rk, t=term, q=pats, g=dbeta: kernels.tt_backward(p, r, t, q, g))


def _same(x, y) -> bool:
    if isinstance(x, tuple):
        return all(_same(a, b) for a, b in zip(x, y))
    return x.shape == y.shape and x.tobytes() == y.tobytes()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=3)
    args = ap.parse_args(argv)

    backends = sorted(kernels.BACKENDS)
    if "cython" not in backends:
        print("compiled backend not built; timing the numpy fallback only")
    print(f"{'case':36s}" + "".join(f"{b:>12s}" for b in backends) + "   speedup  bitwise")
    all_same = True
    for name, fn in cases(np.random.default_rng(0)):
        times, outs = {}, {}
        for b in backends:
            kernels.use_backend(b)
            outs[b] = fn()
            times[b] = min(timeit.repeat(fn, number=args.number, repeat=args.repeat)) / args.number
        same = all(_same(outs[backends[0]], outs[b]) for b in backends[1:])
        all_same &= same
        speed = f"{times['python'] / times['cython']:8.2f}x" if "cython" in times else "       -"
        print(f"{name:36s}" + "".join(f"{times[b] * 1e3:10.3f}ms" for b in backends) + f"  {speed}  {same}")
    kernels.use_backend("cython" if "cython" in backends else "python")
    return 0 if all_same else 1


if __name__ == "__main__":
    raise SystemExit(main())

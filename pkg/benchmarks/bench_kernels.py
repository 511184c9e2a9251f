"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Each kernel is run on identical inputs under both backends; outputs are
checked for equality before timings are reported.
"""
from __future__ import annotations

import argparse
import time

import numpy as np
from scipy.spatial.distance import cdist

from jlcm.kernels import available_backends, load_backend


def _cases(rng):
    x = np.sort(rng.normal(size=4000))
    pts = rng.normal(size=(600, 8))
    cost = cdist(pts, pts, "sqeuclidean") * 0.5
    np.fill_diagonal(cost, np.inf)
    books = np.sort(rng.normal(size=(4, 16)), axis=1)
    idx = rng.integers(0, 16, size=(256, 256))
    vals = rng.normal(size=200_000)
    return {
        "pack_bits(2^16 x 4 bits)": lambda k: k.pack_bits(idx.ravel().astype(np.int64) & 15, 4),
        "nearest_codeword(2e5, 16)": lambda k: k.nearest_codeword(vals, books[0]),
        "kmeans1d_dp(4000, 16)": lambda k: k.kmeans1d_dp(x, 16),
        "ward_1d(4000, 16)": lambda k: k.ward_1d(x, 16),
        "ward_general(600, 8)": lambda k: k.ward_general(cost.copy(), 8),
        "proximal_matrix(256x256, 16)": lambda k: k.proximal_matrix(
            books, np.repeat(np.arange(4), 64), idx.astype(np.int64)),
    }


def _time(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def _same(a, b):
    if isinstance(a, (bytes, bytearray)):
        return bytes(a) == bytes(b)
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is available")
    mods = {name: load_backend(name) for name in backends}
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s}" + "".join(f"{b:>12s}" for b in backends) + "   speedup")
    for name, fn in _cases(rng).items():
        times, outs = [], []
        for b in backends:
            t, out = _time(lambda: fn(mods[b]), args.repeat)
            times.append(t)
            outs.append(out)
        if len(outs) == 2 and not _same(*outs):
            raise SystemExit(f"{name}: backends disagree")
        speed = f"{times[-1] / times[0]:9.1f}x" if len(times) == 2 else ""
        print(f"{name:32s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times) + f"  {speed}")


if __name__ == "__main__":
    main()

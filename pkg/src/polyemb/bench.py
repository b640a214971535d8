"""Benchmark the kernel backends against each other.

Run as ``python -m polyemb.bench``. Times each kernel on training- and
retrieval-shaped inputs for every available backend and verifies that the
backends agree (bitwise for arithmetic-only kernels, to float precision
for the exp-based ones).
"""

import argparse
import time

import numpy as np

from . import _kernels


def _time(fn, *args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _agreement(a, b):
    if isinstance(a, tuple):
        return max(_agreement(x, y) for x, y in zip(a, b))
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-300)
    return float(np.max(np.abs(a - b) / denom))


def _cases(rng, scale):
    n = int(128 * scale)
    h = 16
    big = int(2000 * scale)
    return [
        ("matmul 8x16 @ 16x6", "matmul",
         (rng.standard_normal((8, 16)), rng.standard_normal((16, 6)))),
        (f"matmul {n}x{h} @ {h}x{n}", "matmul",
         (rng.standard_normal((n, h)), rng.standard_normal((h, n)))),
        (f"row_softmax {n}x49", "row_softmax_fwd",
         (rng.standard_normal((n, 49)),)),
        (f"layer_norm {n}x{h}", "layer_norm_fwd",
         (rng.standard_normal((n, h)), np.ones(h), np.zeros(h), 1e-5)),
        (f"l2norm_rows {big}x{h}", "l2norm_rows_fwd",
         (rng.standard_normal((big, h)), 1e-12)),
        (f"sq_dists {n}x{n} (H={h})", "sq_dist_matrix",
         (rng.standard_normal((n, h)), rng.standard_normal((n, h)))),
    ]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--scale", type=float, default=1.0,
                        help="scale factor for the benchmark sizes")
    args = parser.parse_args(argv)

    backends = {name: _kernels.get_backend(name)
                for name in _kernels.available_backends()}
    print(f"active backend: {_kernels.BACKEND}; "
          f"available: {', '.join(backends)}")
    rng = np.random.default_rng(0)
    header = f"{'kernel':<28}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10}{'max rel diff':>14}"
    print(header)
    for label, kernel, kargs in _cases(rng, args.scale):
        times = {}
        results = {}
        for bname, backend in backends.items():
            fn = getattr(backend, kernel)
            results[bname] = fn(*kargs)
            times[bname] = _time(fn, *kargs, repeats=args.repeats)
        row = f"{label:<28}" + "".join(
            f"{times[b] * 1e3:>10.3f}ms" for b in backends
        )
        if len(backends) > 1:
            ratio = times["python"] / max(times["cython"], 1e-12)
            diff = _agreement(results["python"], results["cython"])
            row += f"{ratio:>9.1f}x{diff:>14.2e}"
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

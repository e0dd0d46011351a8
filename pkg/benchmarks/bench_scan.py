"""Benchmark the selective-scan kernel backends against each other.

Runs the forward recurrence and its backward pass on a few panel-shaped
workloads, checks that both backends agree to float64 precision, and
reports wall times plus the speedup of the compiled extension over the
numpy fallback. With no compiled extension available only the fallback
is timed.

Usage: python3 benchmarks/bench_scan.py [--repeats 7]
"""

import argparse
import time

import numpy as np

from magnet.kernels import COMPILED, scan_numpy

if COMPILED:
    from magnet.kernels import _scan
else:
    _scan = None

SIZES = [
    # (stocks, steps, channels, state)
    (4, 64, 32, 16),
    (8, 128, 32, 16),
    (16, 256, 64, 16),
]


def make_inputs(rng, n, t, d, s):
    x = rng.normal(size=(n, t, d))
    delta = np.abs(rng.normal(size=(n, t, d))) * 0.1
    a = -np.abs(rng.normal(size=(d, s)))  # decaying states only
    b = rng.normal(size=(n, t, s))
    c = rng.normal(size=(n, t, s))
    return x, delta, a, b, c


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    header = f"{'shape (N,T,D,S)':>18}  {'pass':>8}  {'numpy':>10}  {'compiled':>10}  {'speedup':>7}"
    print(f"backend available: {'compiled + numpy' if COMPILED else 'numpy only'}")
    print(header)
    print("-" * len(header))
    for n, t, d, s in SIZES:
        x, delta, a, b, c = make_inputs(rng, n, t, d, s)
        y_np, hs_np = scan_numpy.scan_forward(x, delta, a, b, c)
        gy = rng.normal(size=y_np.shape)

        t_fwd_np = best_of(lambda: scan_numpy.scan_forward(x, delta, a, b, c),
                           args.repeats)
        t_bwd_np = best_of(
            lambda: scan_numpy.scan_backward(x, delta, a, b, c, hs_np, gy),
            args.repeats,
        )
        rows = {"forward": (t_fwd_np, None), "backward": (t_bwd_np, None)}

        if COMPILED:
            xs = [np.ascontiguousarray(v) for v in (x, delta, a, b, c)]
            y_c, hs_c = _scan.scan_forward(*xs)
            drift = max(
                float(np.abs(y_c - y_np).max()), float(np.abs(hs_c - hs_np).max())
            )
            grads_np = scan_numpy.scan_backward(x, delta, a, b, c, hs_np, gy)
            grads_c = _scan.scan_backward(*xs, np.ascontiguousarray(hs_c),
                                          np.ascontiguousarray(gy))
            drift = max(
                drift,
                *(float(np.abs(gc - gn).max()) for gc, gn in zip(grads_c, grads_np)),
            )
            if drift > 1e-9:
                print(f"backend disagreement {drift:.2e} at ({n},{t},{d},{s})")
                return 1
            rows["forward"] = (t_fwd_np, best_of(
                lambda: _scan.scan_forward(*xs), args.repeats))
            rows["backward"] = (t_bwd_np, best_of(
                lambda: _scan.scan_backward(*xs, hs_c, gy), args.repeats))

        for label, (t_np, t_c) in rows.items():
            shape = f"({n},{t},{d},{s})"
            if t_c is None:
                print(f"{shape:>18}  {label:>8}  {t_np * 1e3:9.2f}ms  {'-':>10}  {'-':>7}")
            else:
                print(
                    f"{shape:>18}  {label:>8}  {t_np * 1e3:9.2f}ms  "
                    f"{t_c * 1e3:9.2f}ms  {t_np / t_c:6.1f}x"
                )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

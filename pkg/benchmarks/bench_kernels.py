"""Time the two kernel lanes against each other on training-shaped inputs.

Run as: python3 benchmarks/bench_kernels.py [--tokens N] [--repeats R]

Matmul and bf16_quantize must agree bit for bit between lanes, so the
comparison below also re-checks that while timing. gelu lanes may differ
by an ulp (different erf implementations) and are compared loosely.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from moelab.kernels import _fallback

try:
    from moelab.kernels import _core
except ImportError:
    _core = None


def bench(fn, *args, repeats: int) -> float:
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--tokens", type=int, default=512)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    hidden, inner = 64, 256
    x = rng.standard_normal((args.tokens, hidden))
    w1 = rng.standard_normal((hidden, inner)) / np.sqrt(hidden)
    h = rng.standard_normal((args.tokens, inner))

    lanes = [("numpy", _fallback)]
    if _core is not None:
        lanes.append(("compiled", _core))
    else:
        print("compiled lane unavailable (extension not built); timing numpy only")

    flops = 2.0 * args.tokens * hidden * inner
    print(f"matmul ({args.tokens}x{hidden} @ {hidden}x{inner}, "
          f"{flops / 1e6:.1f} MFLOP):")
    results = {}
    for name, impl in lanes:
        dt = bench(impl.matmul, x, w1, repeats=args.repeats)
        results[name] = impl.matmul(x, w1)
        print(f"  {name:>9}: {dt * 1e3:8.3f} ms  ({flops / dt / 1e9:6.2f} GFLOP/s)")
    if len(results) == 2:
        assert np.array_equal(results["numpy"], results["compiled"]), \
            "lanes disagree bitwise on matmul"
        print("  lanes agree bitwise")

    print(f"gelu ({args.tokens}x{inner}):")
    for name, impl in lanes:
        dt = bench(impl.gelu, h, repeats=args.repeats)
        print(f"  {name:>9}: {dt * 1e3:8.3f} ms")
    if _core is not None:
        a, b = _fallback.gelu(h), _core.gelu(h)
        print(f"  lanes max |diff|: {np.max(np.abs(a - b)):.3e}")

    print(f"bf16_quantize ({args.tokens}x{inner}):")
    results = {}
    for name, impl in lanes:
        dt = bench(impl.bf16_quantize, h, repeats=args.repeats)
        results[name] = impl.bf16_quantize(h)
        print(f"  {name:>9}: {dt * 1e3:8.3f} ms")
    if len(results) == 2:
        assert np.array_equal(results["numpy"], results["compiled"]), \
            "lanes disagree bitwise on bf16_quantize"
        print("  lanes agree bitwise")


if __name__ == "__main__":
    main()

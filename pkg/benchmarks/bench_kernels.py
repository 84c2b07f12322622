"""Timing comparison between the compiled and pure-NumPy kernel backends.

Runs the two hot kernels (2-D convolution forward/backward, circular
convolution on contour rings) at pipeline-realistic shapes under each
available backend and prints a per-kernel speedup table.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from circleseg import _kernels


def _time(fn, repeats: int) -> float:
    # One warm-up call, then best-of-N to dampen scheduler noise.
    fn()
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def _cases(rng: np.random.Generator):
    # Shapes mirror the toy backbone on a 64x64 patch and the deformation
    # head on a 128-vertex ring.
    x = rng.standard_normal((64, 64, 3))
    w = rng.standard_normal((3, 3, 3, 16))
    b = rng.standard_normal(16)
    gy = rng.standard_normal((32, 32, 16))
    ring = rng.standard_normal((128, 24))
    taps = rng.standard_normal((9, 24, 24))
    gring = rng.standard_normal((128, 24))

    return [
        ("conv2d forward 64x64x3 -> 32x32x16", lambda: _kernels.conv2d_forward(x, w, b, stride=2, pad=1)),
        ("conv2d backward same shape", lambda: _kernels.conv2d_backward(x, w, gy, stride=2, pad=1)),
        ("circular conv 128 verts, 24 ch", lambda: _kernels.circular_conv_forward(ring, taps)),
        ("circular conv backward", lambda: _kernels.circular_conv_backward(ring, taps, gring)),
    ]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    backends = _kernels.available_backends()
    print(f"available backends: {backends}")
    if len(backends) < 2:
        print("compiled backend not built; timing python backend only")

    rng = np.random.default_rng(0)
    cases = _cases(rng)

    results: dict[str, dict[str, float]] = {name: {} for name, _ in cases}
    original = _kernels.active_backend()
    try:
        for backend in backends:
            _kernels.set_backend(backend)
            for name, fn in cases:
                results[name][backend] = _time(fn, args.repeats)
    finally:
        _kernels.set_backend(original)

    width = max(len(name) for name in results)
    header = f"{'kernel':<{width}}  " + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, times in results.items():
        row = f"{name:<{width}}  " + "".join(f"{times[b] * 1e3:>10.3f}ms" for b in backends)
        if len(backends) == 2:
            row += f"{times['python'] / times['native']:>9.1f}x"
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Compare compiled and NumPy kernel backends on training-shaped workloads.

Run as a script:

    python3 benchmarks/bench_kernels.py [--repeats 5] [--batch 128]

Times conv1d forward/backward and maxpool forward at each layer shape of
the small preset model, verifies both backends agree to float32 round-off,
and prints the compiled-over-numpy speedup per shape.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ecgscreen.nn import kernels

# (name, in_ch, out_ch, k, stride, T): stem plus first conv of each block
SHAPES = [
    ("stem", 12, 16, 17, 1, 1000),
    ("block1", 16, 16, 9, 4, 1000),
    ("block2", 16, 32, 9, 4, 250),
    ("block3", 32, 48, 9, 4, 63),
    ("block4", 48, 64, 9, 4, 16),
]


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv(backend, batch: int, repeats: int, rng) -> list[dict]:
    rows = []
    for name, cin, cout, k, stride, t in SHAPES:
        x = rng.standard_normal((batch, cin, t), dtype=np.float32)
        w = rng.standard_normal((cout, cin, k), dtype=np.float32) * 0.1
        pad = k // 2
        y = backend.conv1d_forward(x, w, stride, pad)
        dy = rng.standard_normal(y.shape, dtype=np.float32)
        rows.append({
            "shape": name,
            "forward_s": _time(lambda: backend.conv1d_forward(x, w, stride, pad),
                               repeats),
            "backward_s": _time(
                lambda: backend.conv1d_backward(x, w, dy, stride, pad, True, True),
                repeats),
        })
    return rows


def check_parity(batch: int, rng) -> float:
    """Max |compiled - numpy| across conv outputs and gradients."""
    compiled = kernels.get_backend("compiled")
    ref = kernels.get_backend("numpy")
    worst = 0.0
    for _, cin, cout, k, stride, t in SHAPES:
        x = rng.standard_normal((batch, cin, t), dtype=np.float32)
        w = rng.standard_normal((cout, cin, k), dtype=np.float32) * 0.1
        pad = k // 2
        yc = compiled.conv1d_forward(x, w, stride, pad)
        yr = ref.conv1d_forward(x, w, stride, pad)
        dy = rng.standard_normal(yc.shape, dtype=np.float32)
        dxc, dwc = compiled.conv1d_backward(x, w, dy, stride, pad, True, True)
        dxr, dwr = ref.conv1d_backward(x, w, dy, stride, pad, True, True)
        for a, b in ((yc, yr), (dxc, dxr), (dwc, dwr)):
            scale = max(1.0, float(np.abs(b).max()))
            worst = max(worst, float(np.abs(a - b).max()) / scale)
    return worst


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--batch", type=int, default=128)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    rng = np.random.default_rng(args.seed)

    try:
        kernels.get_backend("compiled")
    except Exception as exc:
        raise SystemExit(f"compiled backend unavailable: {exc}")

    print(f"active backend: {kernels.BACKEND}")
    worst = check_parity(args.batch, rng)
    print(f"parity (relative max abs diff, conv fwd+bwd): {worst:.3e}")

    results = {
        name: bench_conv(kernels.get_backend(name), args.batch, args.repeats, rng)
        for name in ("numpy", "compiled")
    }
    header = f"{'shape':<8} {'numpy fwd':>11} {'comp fwd':>11} {'x':>6}   " \
             f"{'numpy bwd':>11} {'comp bwd':>11} {'x':>6}"
    print(header)
    print("-" * len(header))
    for np_row, c_row in zip(results["numpy"], results["compiled"]):
        f_speed = np_row["forward_s"] / c_row["forward_s"]
        b_speed = np_row["backward_s"] / c_row["backward_s"]
        print(f"{np_row['shape']:<8} {np_row['forward_s']*1e3:>9.2f}ms "
              f"{c_row['forward_s']*1e3:>9.2f}ms {f_speed:>5.1f}x   "
              f"{np_row['backward_s']*1e3:>9.2f}ms {c_row['backward_s']*1e3:>9.2f}ms "
              f"{b_speed:>5.1f}x")


if __name__ == "__main__":
    main()

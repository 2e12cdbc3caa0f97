"""Time each conv/pool kernel on the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--batch 32] [--size 28] [--repeats 5]

Shapes follow the cnn-s trunk (1 -> 8 -> 16 -> 32 channels with 2x pooling).
Reports the median over ``--repeats`` calls after one warm-up call, which also
triggers numba compilation.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from fastretrain import kernels


def layer_shapes(batch: int, size: int):
    shapes, ch, s = [], 1, size
    for out in (8, 16, 32):
        shapes.append(((batch, ch, s, s), (out, ch, 3, 3)))
        ch, s = out, s // 2
    return shapes


def time_call(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench_backend(impl: dict, batch: int, size: int, repeats: int) -> dict[str, float]:
    rng = np.random.default_rng(0)
    totals = dict.fromkeys(kernels.BACKENDS["numpy"], 0.0)
    for x_shape, w_shape in layer_shapes(batch, size):
        x, w, b = rng.normal(size=x_shape), rng.normal(size=w_shape), rng.normal(size=w_shape[0])
        y = impl["conv_forward"](x, w, b, 1, 1)
        g = rng.normal(size=y.shape)
        pooled, idx = impl["maxpool_forward"](y, 2)
        gp = rng.normal(size=pooled.shape)
        calls = {
            "conv_forward": lambda: impl["conv_forward"](x, w, b, 1, 1),
            "conv_backward_weight": lambda: impl["conv_backward_weight"](g, x, w.shape, 1, 1),
            "conv_backward_input": lambda: impl["conv_backward_input"](g, w, x.shape, 1, 1),
            "maxpool_forward": lambda: impl["maxpool_forward"](y, 2),
            "maxpool_backward": lambda: impl["maxpool_backward"](gp, idx, y.shape, 2),
        }
        for name, fn in calls.items():
            totals[name] += time_call(fn, repeats)
    return totals


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--size", type=int, default=28)
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args(argv)

    results = {name: bench_backend(impl, args.batch, args.size, args.repeats) for name, impl in sorted(kernels.BACKENDS.items())}
    names = sorted(results)
    print(f"median ms summed over the three cnn-s layers, batch {args.batch}, {args.size}x{args.size} input")
    header = f"{'kernel':<22}" + "".join(f"{n:>12}" for n in names)
    if "numba" in results:
        header += f"{'speedup':>10}"
    print(header)
    for kernel in results["numpy"]:
        line = f"{kernel:<22}" + "".join(f"{results[n][kernel]:>12.3f}" for n in names)
        if "numba" in results:
            line += f"{results['numpy'][kernel] / results['numba'][kernel]:>9.2f}x"
        print(line)
    if "numba" not in results:
        print("numba is not installed; only the numpy backend was timed")


if __name__ == "__main__":
    main()

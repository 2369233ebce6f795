#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallbacks.

Runs every hot kernel on representative shapes from real model/metric calls
and prints per-backend timings plus a numeric agreement check. The results
justify the per-kernel defaults of the `auto` backend (convolutions go
through BLAS, morphology and rasterization through numba); run with
MEMVOS_KERNELS=numpy or =numba to force either side package-wide.

Usage: python benchmarks/bench_kernels.py [--repeat-seconds 0.4]
"""

import argparse
import time

import numpy as np

from memvos.kernels import numba_backend, numpy_backend


def timeit(fn, *args, seconds=0.4):
    fn(*args)  # warmup / jit compile
    n, t0 = 0, time.perf_counter()
    while time.perf_counter() - t0 < seconds:
        fn(*args)
        n += 1
    return (time.perf_counter() - t0) / n


def agree(a, b):
    # exact for the discrete kernels; float32 convolutions differ by BLAS
    # vs sequential accumulation order, so compare at f32 reduction accuracy
    if a.dtype == bool or a.dtype == np.uint8:
        return bool(np.array_equal(a, b))
    scale = max(1.0, float(np.abs(a).max()))
    return bool(np.allclose(a, b, rtol=5e-4, atol=5e-6 * scale))


def bench_conv(seconds):
    rng = np.random.default_rng(0)
    cases = [
        ("encoder stage1  B2 3->16 96x96 s2", (2, 3, 98, 98), (16, 3, 3, 3), 2),
        ("encoder stage2  B2 16->24 48x48 s2", (2, 16, 50, 50), (24, 16, 3, 3), 2),
        ("compressor gate B2 64->32 6x6 s1", (2, 64, 8, 8), (32, 64, 3, 3), 1),
        ("decoder mix     B2 24->16 12x12 s1", (2, 24, 14, 14), (16, 24, 3, 3), 1),
        ("decoder head    B2 12->1 48x48 s1", (2, 12, 50, 50), (1, 12, 3, 3), 1),
    ]
    rows = []
    for name, xs, ws, stride in cases:
        xp = rng.normal(size=xs).astype(np.float32)
        w = rng.normal(size=ws).astype(np.float32)
        t_np = timeit(numpy_backend.conv2d_forward, xp, w, stride,
                      seconds=seconds)
        t_nb = timeit(numba_backend.conv2d_forward, xp, w, stride,
                      seconds=seconds)
        ok = agree(numpy_backend.conv2d_forward(xp, w, stride),
                   numba_backend.conv2d_forward(xp, w, stride))
        rows.append((f"conv2d  {name}", t_np, t_nb, ok))
    return rows


def bench_dilate(seconds):
    rng = np.random.default_rng(1)
    rows = []
    for h, w, radius in ((96, 96, 1), (96, 96, 2), (480, 854, 4)):
        m = rng.random((h, w)) < 0.03
        t_np = timeit(numpy_backend.dilate_disk, m, radius, seconds=seconds)
        t_nb = timeit(numba_backend.dilate_disk, m, radius, seconds=seconds)
        ok = agree(numpy_backend.dilate_disk(m, radius),
                   numba_backend.dilate_disk(m, radius))
        rows.append((f"dilate_disk {h}x{w} r{radius}", t_np, t_nb, ok))
    return rows


def bench_rasterize(seconds):
    rows = []
    ang = 2 * np.pi * np.arange(6) / 6
    ys, xs = 48 + 20 * np.sin(ang), 48 + 20 * np.cos(ang)
    t_np = timeit(numpy_backend.fill_polygon, 96, 96, ys, xs, seconds=seconds)
    t_nb = timeit(numba_backend.fill_polygon, 96, 96, ys, xs, seconds=seconds)
    ok = agree(numpy_backend.fill_polygon(96, 96, ys, xs),
               numba_backend.fill_polygon(96, 96, ys, xs))
    rows.append(("fill_polygon 96x96 hexagon", t_np, t_nb, ok))
    args = (96, 96, 48.0, 48.0, 14.0, 22.0, 0.7)
    t_np = timeit(numpy_backend.fill_ellipse, *args, seconds=seconds)
    t_nb = timeit(numba_backend.fill_ellipse, *args, seconds=seconds)
    ok = agree(numpy_backend.fill_ellipse(*args),
               numba_backend.fill_ellipse(*args))
    rows.append(("fill_ellipse 96x96", t_np, t_nb, ok))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat-seconds", type=float, default=0.4)
    args = ap.parse_args()
    rows = []
    rows += bench_conv(args.repeat_seconds)
    rows += bench_dilate(args.repeat_seconds)
    rows += bench_rasterize(args.repeat_seconds)
    width = max(len(r[0]) for r in rows)
    print(f"{'kernel / case'.ljust(width)}  {'numpy':>10}  {'numba':>10}  "
          f"{'speedup':>8}  agree")
    for name, t_np, t_nb, ok in rows:
        speed = t_np / t_nb
        print(f"{name.ljust(width)}  {t_np * 1e3:8.3f}ms  {t_nb * 1e3:8.3f}ms"
              f"  {speed:7.2f}x  {'yes' if ok else 'NO'}")
    print("\nspeedup > 1 means numba wins; the auto backend picks numba for "
          "the morphology/rasterization kernels and numpy for convolutions.")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Time the numba-jitted kernels against the pure-numpy fallbacks.

Runs the pipeline hot paths (scene rendering, fusion, refinement, volume
rendering) under both backends on the same inputs, reports best-of-N wall
times and the speedup, and verifies that the outputs agree.

Usage:
    python benchmarks/bench_backends.py [--frames 6] [--grid 32]
                                        [--width 64] [--height 48]
                                        [--samples 64] [--repeats 3]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fusefield.accel import set_backend
from fusefield.fusion import fuse_frames
from fusefield.geometry import CameraIntrinsics, GridSpec
from fusefield.render import render_image
from fusefield.scene import orbit_poses, preset_scene, render_frame
from fusefield.train import ModelParams


def best_of(repeats, fn):
    best = np.inf
    result = None
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - start)
    return best, result


def run_backend(name, args, poses, scene, grid, intr, params, repeats):
    """Per-stage best wall times and the artifacts needed for comparison."""
    set_backend(name)
    times = {}

    times["render_scene"], frames = best_of(
        repeats, lambda: [render_frame(scene, p, intr) for p in poses]
    )
    times["fuse"], state = best_of(
        repeats, lambda: fuse_frames(grid, frames, params.encoder, 0.15)
    )
    times["refine"], field = best_of(repeats, lambda: params.build_field(state))
    times["render_field"], buffers = best_of(
        repeats,
        lambda: render_image(field, poses[0], intr, n_samples=args.samples),
    )
    artifacts = {
        "tsdf": state.tsdf.data,
        "feat_mean": state.feat_mean.data,
        "refined": field.refined.data,
        "color": buffers.color,
        "depth": buffers.depth,
    }
    return times, artifacts


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--frames", type=int, default=6)
    parser.add_argument("--grid", type=int, default=32)
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--height", type=int, default=48)
    parser.add_argument("--samples", type=int, default=64)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    scene = preset_scene("sphere_floor", feature_dim=8)
    n = args.grid
    grid = GridSpec((-0.8, -0.8, -0.05), 1.6 / n, (n, n, n))
    intr = CameraIntrinsics(
        args.width * 0.75, args.width * 0.75,
        args.width / 2.0, args.height / 2.0, args.width, args.height,
    )
    poses = orbit_poses(np.array([0.0, 0.0, 0.45]), 1.0, 0.35, args.frames)
    params = ModelParams.create(c_e=4, c_field=8, semantic_dim=8, hidden=32, seed=0)

    print(f"workload: {args.frames} frames {args.width}x{args.height}, "
          f"grid {n}^3, {args.samples} samples/ray, best of {args.repeats}")

    # Warm the JIT cache outside the timed region.
    set_backend("numba")
    warm = [render_frame(scene, poses[0], intr)]
    warm_state = fuse_frames(grid, warm, params.encoder, 0.15)
    render_image(params.build_field(warm_state), poses[0], intr, n_samples=8)

    results = {}
    artifacts = {}
    for name in ("numba", "numpy"):
        results[name], artifacts[name] = run_backend(
            name, args, poses, scene, grid, intr, params, args.repeats
        )
    set_backend("numba")

    print(f"\n{'stage':<14}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}")
    for stage in results["numba"]:
        tj, tn = results["numba"][stage], results["numpy"][stage]
        print(f"{stage:<14}{tj:>12.4f}{tn:>12.4f}{tn / tj:>9.1f}x")

    print("\nbackend agreement (max abs difference):")
    failed = False
    for key, ref in artifacts["numba"].items():
        diff = float(np.max(np.abs(ref - artifacts["numpy"][key]))) if ref.size else 0.0
        ok = diff < 1e-9
        failed |= not ok
        print(f"  {key:<10} {diff:.3e}  {'ok' if ok else 'MISMATCH'}")
    return 1 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())

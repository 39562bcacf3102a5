"""Time every kernel's numba and numpy flavours on desk-scale inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Also runs one short end-to-end pretraining under each backend in a
subprocess (the backend is fixed at import time by GPA3D_DISABLE_JIT).
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from gpa3d import _kernels as K
from gpa3d.synth import generate_scene, preset


def best_of(fn, repeat):
    fn()  # warm-up, includes numba compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def inputs(rng):
    scene = generate_scene(preset("waymo_like", seed=0), 0)
    boxes = np.array([b.bev for b in scene.boxes])
    dets = np.column_stack([rng.uniform(-20, 20, (300, 2)), rng.uniform(3.5, 5, 300), rng.uniform(1.6, 2, 300),
                            rng.uniform(-np.pi, np.pi, 300)])
    scores = rng.uniform(size=300)
    pad = rng.normal(size=(68, 68, 8))
    iy, ix = np.nonzero(rng.uniform(size=(64, 64)) < 0.15)
    z = rng.normal(size=(iy.size, 5, 5, 8))
    grid = (-25.6, -25.6, 0.8, 64, 64)
    return dict(scene=scene, boxes=boxes, dets=dets, scores=scores, pad=pad, iy=iy, ix=ix, z=z, grid=grid)


def cases(d):
    g = d["grid"]
    return {
        "bev_iou_matrix 300x300": (lambda f: f(d["dets"], d["dets"]), K.bev_iou_matrix_jit, K.bev_iou_matrix_np),
        "nms 300": (lambda f: f(d["dets"], d["scores"], 0.3), K.nms_jit, K.nms_np),
        "rasterize scene": (lambda f: f(d["scene"].points, *g), K.rasterize_jit, K.rasterize_np),
        "points_in_box scene": (lambda f: f(d["scene"].points[:, :2], d["boxes"][0], 0.0),
                                K.points_in_box_jit, K.points_in_box_np),
        "patch_gather 5x5": (lambda f: f(d["pad"], d["iy"], d["ix"], 5), K.patch_gather_jit, K.patch_gather_np),
        "patch_scatter 5x5": (lambda f: f(d["z"], d["iy"], d["ix"], np.zeros((68, 68, 8))),
                              K.patch_scatter_jit, K.patch_scatter_np),
        "box_cells scene": (lambda f: f(d["boxes"], *g), K.box_cells_jit, K.box_cells_np),
    }


END_TO_END = """
import time
from gpa3d import _kernels
from gpa3d.adapt import TrainConfig, pretrain
from gpa3d.synth import generate_domain, preset
src = generate_domain(preset("waymo_like", seed=0, n_scenes=16))
pretrain(src[:1], TrainConfig(pretrain_epochs=1, batch_source=1))
t = time.perf_counter()
pretrain(src, TrainConfig(pretrain_epochs=2))
print(_kernels.backend(), time.perf_counter() - t)
"""


def end_to_end():
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, GPA3D_DISABLE_JIT=flag, GPA3D_LOG="error")
        r = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
        name, secs = r.stdout.split()
        out[name] = float(secs)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")
    d = inputs(np.random.default_rng(0))
    print(f"{'kernel':<24}{'numba ms':>10}{'numpy ms':>10}{'speed-up':>10}")
    for name, (call, fj, fn) in cases(d).items():
        tj = best_of(lambda: call(fj), args.repeat)
        tn = best_of(lambda: call(fn), args.repeat)
        print(f"{name:<24}{1e3 * tj:>10.3f}{1e3 * tn:>10.3f}{tn / tj:>9.1f}x")
    if not args.skip_end_to_end:
        e = end_to_end()
        print(f"{'pretrain 16 scenes x2':<24}{1e3 * e['numba']:>10.0f}{1e3 * e['numpy']:>10.0f}"
              f"{e['numpy'] / e['numba']:>9.1f}x")


if __name__ == "__main__":
    main()

"""Compare the numba kernels against the numpy fallback.

Each backend runs in its own interpreter, selected through
MVDEPTH_DISABLE_NUMBA, so both see a clean import of ``mvdepth.kernels``.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np


def _cases():
    from scipy.spatial import cKDTree

    from mvdepth import formation, kernels, pipeline
    from mvdepth.cli import default_config_path
    from mvdepth.scene_io import load_config

    rng = np.random.default_rng(0)
    n = 256
    x = 1300 + 30 * np.sin(np.arange(n) / 20) + rng.normal(0, 7, n)
    F = rng.normal(size=(n, 6))
    M = np.eye(6)
    D = rng.normal(size=(40 * n, 6))
    c = rng.uniform(0, 4, 40 * n)
    P = rng.normal(size=(3, n, 3))
    valid = np.ones((3, n), bool)
    pts = rng.normal(size=(20000, 3)) * [200, 50, 5] + [0, 0, 1300]
    _, idx = cKDTree(pts).query(pts, k=16)
    idx = np.ascontiguousarray(idx, dtype=np.int64)

    run = load_config(default_config_path())
    gt = formation.render_scene_pair(formation.make_scene(run.scene, run.rig))
    lo, hi = formation.scene_depth_range(*gt)
    Q = formation.quantization_step_for_bits((lo, hi), 8)
    obs = [formation.simulate_observation(img, formation.FormationParams(Q, 50.0, s))
           for img, s in zip(gt, (1, 2))]
    cfg = pipeline.config_from_run(run, 50.0, Q, hi - lo)

    return {
        "warp_matrices (N=256)": lambda: kernels.warp_matrices(x, 20000.0, 1.0, 4.0, np.ones(n), True),
        "band_weights (N=256, T=4)": lambda: kernels.band_weights(F, M, 4),
        "glr_value_grad (10k pairs)": lambda: kernels.glr_value_grad(D, c, M),
        "grid_normals (row of 256)": lambda: kernels.grid_normals(P, valid, 1),
        "knn_normals (20k pts, k=16)": lambda: kernels.knn_normals(pts, idx),
        "enhance_image_pair (64x256)": lambda: pipeline.enhance_image_pair(*obs, run.rig, cfg),
    }


def worker(repeat):
    from mvdepth._accel import BACKEND

    out = {"backend": BACKEND, "times": {}}
    for name, fn in _cases().items():
        fn()  # warm-up, includes JIT compilation
        number = 1 if name.startswith("enhance") else 20
        best = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
        out["times"][name] = best
    print(json.dumps(out))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        worker(args.repeat)
        return
    results = {}
    for flag in ("0", "1"):
        env = {**os.environ, "MVDEPTH_DISABLE_NUMBA": flag}
        proc = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(args.repeat)],
                              env=env, capture_output=True, text=True, check=True)
        res = json.loads(proc.stdout.strip().splitlines()[-1])
        results[res["backend"]] = res["times"]
    if "numba" not in results:
        print("numba is not installed; only the numpy backend was timed")
    names = list(next(iter(results.values())))
    print(f"{'kernel':32s} {'numba [ms]':>12s} {'numpy [ms]':>12s} {'speed-up':>9s}")
    for name in names:
        tn = results.get("numba", {}).get(name)
        tp = results["numpy"][name]
        cols = f"{tn * 1e3:12.3f}" if tn else f"{'-':>12s}"
        ratio = f"{tp / tn:9.1f}" if tn else f"{'-':>9s}"
        print(f"{name:32s} {cols} {tp * 1e3:12.3f} {ratio}")


if __name__ == "__main__":
    main()

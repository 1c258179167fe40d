"""Time the numba and numpy kernels on the same inputs.

    python3 benchmarks/bench_backends.py --sizes 200 2000 10000 --repeat 3

Each row reports the best wall time per call and the largest output
difference between the two backends. The first numba call (JIT compile) is
excluded.
"""

from __future__ import annotations

import argparse
import math
import time

import numpy as np

from splatparse import voxels
from splatparse.camera import CameraPose
from splatparse.raster import feature_weights, render
from splatparse.synth import make_shape
from splatparse.gaussians import GaussianScene


def scene_of_size(n: int, seed: int = 0) -> GaussianScene:
    rng = np.random.default_rng(seed)
    parts, left, lab = [], n, 0
    while left > 0:
        k = min(left, 500)
        shape = str(rng.choice(["box", "sphere", "cylinder"]))
        parts.append(make_shape(shape, rng.uniform(-0.6, 0.6, 3), rng.uniform(0.1, 0.3, 3), n=k, rng=rng, label=lab))
        left -= k
        lab += 1
    return GaussianScene.concat(parts)


def best_time(fn, repeat: int) -> tuple[float, object]:
    out, best = None, math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[200, 2000, 10000])
    ap.add_argument("--image", type=int, default=128)
    ap.add_argument("--grid", type=int, default=32, help="voxel resolution")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    cam = CameraPose("perspective", 2.5, math.radians(30), math.radians(25), image_size=(args.image, args.image))
    small = scene_of_size(20)
    # compile outside the timed region
    render(small, cam, backend="numba")
    feature_weights(small, cam, backend="numba")
    voxels.voxelize(small, 8, backend="numba")

    jobs = {
        "render": lambda s, b: render(s, cam, backend=b).color,
        "weights": lambda s, b: feature_weights(s, cam, backend=b).toarray(),
        "voxelize": lambda s, b: voxels.voxelize(s, args.grid, backend=b).occupancy,
    }
    print(f"{'kernel':<10}{'gaussians':>10}{'numba s':>11}{'numpy s':>11}{'speedup':>9}{'max diff':>11}")
    for n in args.sizes:
        scene = scene_of_size(n)
        for name, job in jobs.items():
            t_nb, a = best_time(lambda: job(scene, "numba"), args.repeat)
            t_np, b = best_time(lambda: job(scene, "numpy"), args.repeat)
            diff = float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float)))) if np.size(a) else 0.0
            print(f"{name:<10}{n:>10}{t_nb:>11.4f}{t_np:>11.4f}{t_np / t_nb:>9.1f}{diff:>11.2e}")


if __name__ == "__main__":
    main()

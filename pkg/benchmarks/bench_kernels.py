"""Numba vs. pure-numpy timings for the verifier kernels.

    python3 benchmarks/bench_kernels.py [--reps 20]

Both variants are called directly, so UNIDIFF_NO_NUMBA does not matter here.
The first numba call (JIT compile or cache load) is excluded from timing.
"""

import argparse
import statistics
import time

import numpy as np

from unidiff import kernels, world


def timeit(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def cases(rng):
    scene = world.random_scene(rng, 3)
    image = world.render(scene) + rng.normal(0, 0.05, (64, 64, 3)).astype(np.float32)
    labels = world.label_image(image)
    _, fills, outlines = world.stencils()
    stencil = np.concatenate([fills, outlines])
    template = world.glyph(0)
    n_labels = len(world.LABEL_COLORS)
    return {
        "nearest_color": (
            lambda: kernels.nearest_color_numpy(image, world.LABEL_COLORS),
            lambda: kernels.nearest_color_numba(image, world.LABEL_COLORS),
        ),
        "ncc_map": (
            lambda: kernels.ncc_map_numpy(image, template),
            lambda: kernels.ncc_map_numba(image, template),
        ),
        "stencil_counts": (
            lambda: kernels.stencil_counts_numpy(labels, stencil, world.CELL, n_labels),
            lambda: kernels.stencil_counts_numba(labels, stencil, world.CELL, n_labels),
        ),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    if not kernels.HAVE_NUMBA:
        print("numba is not importable; only the numpy path can run")
        return
    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  match")
    for name, (np_fn, nb_fn) in cases(np.random.default_rng(args.seed)).items():
        same = np.allclose(np_fn(), nb_fn(), atol=1e-5)
        t_np, t_nb = timeit(np_fn, args.reps), timeit(nb_fn, args.reps)
        print(f"{name:<16}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.1f}x  {same}")


if __name__ == "__main__":
    main()

"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--size 200000] [--repeat 5]

Each kernel is called once untimed so numba compilation is excluded, then
the best of ``--repeat`` runs is reported. Outputs of the two paths are
compared before timing.
"""
import argparse
import time

import numpy as np

from wtrack import kernels
from wtrack.geometry import normalize_quat, quat_to_rotmat

FX, FY, CX, CY = 500.0, 500.0, 320.0, 240.0


def best_of(fn, args, repeat):
    fn(*args)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def inputs(size, rng):
    T = 30
    R = quat_to_rotmat(normalize_quat(np.array([1.0, 0, 0, 0]) + rng.normal(0, 0.05, (T, 4))))
    t = rng.normal(0, 0.2, (T, 3))
    fidx = rng.integers(0, T, size)
    Xc = rng.uniform([-1, -1, 1], [1, 1, 6], (size, 3))
    X = np.einsum("mji,mj->mi", R[fidx], Xc - t[fidx])
    uv = rng.uniform([0, 0], [640, 480], (size, 2))
    dep = rng.uniform(1, 6, size)
    f2 = (fidx + rng.integers(1, T, size)) % T
    uv2 = rng.uniform([0, 0], [640, 480], (size, 2))
    n_pts = max(size // 30, 10)
    traj = rng.normal(0, 1, (n_pts, T, 3))
    nbr = (np.arange(n_pts)[:, None] + np.arange(1, 5)[None]) % n_pts
    pos = rng.uniform([0, 0], [640, 480], (size // 10, 2))
    return {
        "obs_terms": ((R, t, X, fidx, uv, dep, FX, FY, CX, CY, 1.0, 1.0, 1e-6, 8000.0),
                      kernels._obs_terms_np, kernels._obs_terms_nb),
        "pair_terms": ((R, t, fidx, f2, uv, dep, uv2, FX, FY, CX, CY, 1e-6, 8000.0),
                       kernels._pair_terms_np, kernels._pair_terms_nb),
        "arap_terms": ((traj, nbr), kernels._arap_np, kernels._arap_nb),
        "coverage": ((pos, 480, 640, 2.0), kernels._coverage_np, kernels._coverage_nb),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-9, atol=1e-9)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=200_000, help="observations per call")
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<12} {'numpy ms':>10} {'numba ms':>10} {'speed-up':>9}  match")
    for name, (a, f_np, f_nb) in inputs(args.size, rng).items():
        ok = same(f_np(*a), f_nb(*a))
        t_np = best_of(f_np, a, args.repeat)
        t_nb = best_of(f_nb, a, args.repeat)
        print(f"{name:<12} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>8.1f}x  {ok}")


if __name__ == "__main__":
    main()

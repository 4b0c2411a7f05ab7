"""Compiled vs pure-Python kernels.

    python benchmarks/bench_kernels.py [--resolution 16] [--repeat 3]

Prints the best-of-``repeat`` wall time of each kernel for both backends and
checks that their outputs are identical.
"""

import argparse
import time

import numpy as np

from memhomog import _pycore, geometry as geo
from memhomog.grid import Q1Mesh

try:
    from memhomog import _core
except ImportError:
    _core = None


def best(fn, repeat):
    t = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        t.append(time.perf_counter() - t0)
    return min(t), out


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--resolution", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    n = args.resolution
    geom = geo.voxelize({"dim": 3, "shape": "cross", "resolution": n})
    mask = np.ascontiguousarray(geom.solid.astype(np.uint8))
    per = (True, True, False)
    mesh = Q1Mesh(geom.shape, geom.h, geom.periodic, geom.solid)
    ke = np.random.default_rng(0).standard_normal((mesh.n_elements, 24, 24))
    cases = {
        "label_periodic": lambda impl: impl.label_periodic(mask, per),
        "unwrap_shifts": lambda impl: impl.unwrap_shifts(mask, per),
        "q1_scatter": lambda impl: impl.q1_scatter(mesh.conn, ke, 3),
    }
    print(f"cross cell, resolution {n}: {mask.size} voxels, {mesh.n_elements} solid elements")
    print(f"{'kernel':<16}{'python [s]':>12}{'cython [s]':>12}{'speed-up':>10}  identical")
    for name, call in cases.items():
        tp, op = best(lambda: call(_pycore), args.repeat)
        if _core is None:
            print(f"{name:<16}{tp:12.4f}{'n/a':>12}{'':>10}  -")
            continue
        tc, oc = best(lambda: call(_core), args.repeat)
        print(f"{name:<16}{tp:12.4f}{tc:12.4f}{tp / tc:10.1f}  {same(op, oc)}")


if __name__ == "__main__":
    main()

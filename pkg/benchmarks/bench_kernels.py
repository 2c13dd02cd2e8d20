"""Time the hot kernels with numba on and off.

The backend is fixed at import, so each setting runs in its own interpreter::

    python3 benchmarks/bench_kernels.py [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from bladeforge._accel import use_numba
from bladeforge.hull import build_hull, violation_margin
from bladeforge.kdtree import KdTree
from bladeforge.meshing import marching_cubes, sample_grid

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
data = rng.normal(size=(15_000, 3))
queries = rng.normal(size=(100_000, 3))
tree = KdTree(data)
hull = build_hull(rng.normal(size=(15_000, 3)) * [1.0, 0.4, 2.0])
grid = sample_grid(lambda x: np.linalg.norm(x * [1.0, 1.3, 0.8], axis=1) - 0.6, None, 128)

def best(fn):
    fn()                                   # first call pays for compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)

print(json.dumps({
    "numba": use_numba(),
    "kd query (100k x 15k, k=1)": best(lambda: tree.query(queries)),
    "hull margin (100k points)": best(lambda: violation_margin(hull, queries)),
    "marching cubes (128^3)": best(lambda: marching_cubes(grid)),
}))
"""


def run(flag: str, repeat: int) -> dict:
    env = dict(os.environ, FORGE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    fast, slow = run("1", args.repeat), run("0", args.repeat)
    if not fast.pop("numba"):
        print("warning: numba not importable, both columns use numpy")
    slow.pop("numba")
    print(f"{'kernel':32s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s}")
    for name in fast:
        print(f"{name:32s} {fast[name]:10.4f} {slow[name]:10.4f} {slow[name] / fast[name]:7.1f}x")


if __name__ == "__main__":
    main()

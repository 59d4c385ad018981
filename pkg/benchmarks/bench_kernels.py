"""Time the compiled kernels against the pure-Python loops.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--json out.json]
"""
import argparse
import json
import sys
import timeit

import numpy as np

from dipsep import kernels


def _cases(rng):
    cx, cy = rng.normal(size=(32, 8)), rng.normal(size=(32, 8))
    px, py = rng.random(32), rng.random(32)
    pts = rng.normal(size=(64, 8))
    pmf = rng.dirichlet(np.ones(64))
    joint = rng.dirichlet(np.ones(32 * 32)).reshape(32, 32)
    ch = rng.dirichlet(np.ones(8), size=16)
    p1, p2 = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
    return {
        "mmd_triple_sum (32x32, D=8)": lambda b: kernels.mmd_triple_sum(cx, cy, px, py, 1.0, backend=b),
        "pairwise_distances (64, D=8)": lambda b: kernels.pairwise_distances(pts, backend=b),
        "entropy_bits (64)": lambda b: kernels.entropy_bits(pmf, backend=b),
        "joint_entropy_bits (32x32)": lambda b: kernels.joint_entropy_bits(joint, backend=b),
        "cue_joints (4x4 -> 16x8)": lambda b: kernels.cue_joints(p1, p2, ch, backend=b),
    }


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(o) for o in out])
    return np.ravel(out)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", help="also write the timings as JSON")
    args = ap.parse_args(argv)

    try:
        kernels._select("cython")
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1

    rows = []
    print(f"{'kernel':32s} {'python (us)':>12s} {'cython (us)':>12s} {'speedup':>8s}")
    for name, fn in _cases(np.random.default_rng(0)).items():
        res = {}
        for backend in ("python", "cython"):
            timer = timeit.Timer(lambda: fn(backend))
            n, _ = timer.autorange()
            res[backend] = min(timer.repeat(args.repeats, n)) / n * 1e6
        if not np.allclose(_flat(fn("python")), _flat(fn("cython")), rtol=0, atol=1e-9):
            raise AssertionError(f"{name}: backends disagree")
        speed = res["python"] / res["cython"]
        rows.append({"kernel": name, "python_us": res["python"], "cython_us": res["cython"], "speedup": speed})
        print(f"{name:32s} {res['python']:12.1f} {res['cython']:12.1f} {speed:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())

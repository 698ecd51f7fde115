"""Time the trilinear pull/push kernels: compiled extension against the numpy fallback.

    python benchmarks/bench_kernels.py --dims 64 --points 200000 --repeat 5

Prints one row per (kernel, backend) with the best wall time over the
repeats, throughput, and the speedup over the numpy fallback. Both
backends are checked to agree before anything is timed.
"""

import argparse
import json
import sys
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from svrecon import _backend
from svrecon.sampling import Volume, pull, push


def make_problem(dims, n_points, seed):
    rng = np.random.default_rng(seed)
    vol = rng.standard_normal((dims,) * 3)
    coords = rng.uniform(-1.0, dims, (n_points, 3))
    vals = rng.standard_normal(n_points)
    return vol, coords, vals


def run_push(vol_shape, coords, vals, backend):
    acc = Volume.empty(vol_shape)
    push(acc, coords, vals, backend=backend)
    return acc


def check_agreement(vol, coords, vals, backends):
    ref_pull = pull(vol, coords, backend="python")
    ref_push = run_push(vol.shape, coords, vals, "python")
    for b in backends:
        p = pull(vol, coords, backend=b)
        acc = run_push(vol.shape, coords, vals, b)
        if not (np.allclose(p, ref_pull, atol=1e-9) and np.allclose(acc.data, ref_push.data, atol=1e-9)
                and np.allclose(acc.weight, ref_push.weight, atol=1e-9)):
            raise SystemExit(f"backend {b} disagrees with the numpy fallback")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, default=64)
    ap.add_argument("--points", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="print rows as JSON lines")
    args = ap.parse_args(argv)

    backends = _backend.available()
    if "cython" not in backends:
        print("compiled extension not built; timing the numpy fallback only", file=sys.stderr)
    vol, coords, vals = make_problem(args.dims, args.points, args.seed)
    check_agreement(vol, coords, vals, backends)

    jobs = {
        "pull": lambda b: pull(vol, coords, backend=b),
        "push": lambda b: run_push(vol.shape, coords, vals, b),
    }
    rows = []
    with threadpool_limits(1):
        for kernel, fn in jobs.items():
            base = None
            for b in sorted(backends, key=lambda x: x != "python"):
                fn(b)  # warm up
                best = min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat))
                base = best if b == "python" else base
                rows.append({"kernel": kernel, "backend": b, "seconds": best,
                             "mpoints_per_s": args.points / best / 1e6,
                             "speedup": base / best})
    if args.json:
        for r in rows:
            print(json.dumps(r))
        return 0
    print(f"{args.dims}^3 volume, {args.points} points, best of {args.repeat}, single thread")
    print(f"{'kernel':<6} {'backend':<8} {'seconds':>10} {'Mpts/s':>9} {'speedup':>8}")
    for r in rows:
        print(f"{r['kernel']:<6} {r['backend']:<8} {r['seconds']:>10.4f} "
              f"{r['mpoints_per_s']:>9.2f} {r['speedup']:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())

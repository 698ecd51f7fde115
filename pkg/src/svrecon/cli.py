"""``svrecon`` command line: simulate, reconstruct, evaluate, oracle.

Exit status is 0 on success, 2 for usage errors and 1 for any other
failure, in which case a JSON object ``{"error": ..., "message": ...}`` is
written to stderr. ``SVRECON_NUM_THREADS`` caps the BLAS thread pools.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import nullcontext
from io import StringIO
from pathlib import Path

THREADS_ENV = "SVRECON_NUM_THREADS"


def _thread_limit(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(n)


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        from .io import MalformedHeaderError

        raise MalformedHeaderError(f"{path}: not valid JSON ({exc})", field="config") from exc


def cmd_simulate(args):
    from . import io, pipeline
    from .motion_sim import MotionConfig

    motion = MotionConfig.from_dict(_load_json(args.motion)) if args.motion else MotionConfig()
    seed = motion.seed if args.seed is None else args.seed
    phantom = pipeline.load_phantom(args.phantom, args.dims, seed)
    _, written = pipeline.write_simulation(args.out, phantom, motion, seed=seed,
                                           thickness=args.thickness, gap=args.gap,
                                           psf_kind=args.psf)
    config = {"motion": motion.to_dict(), "phantom": args.phantom, "dims": args.dims,
              "thickness": args.thickness, "gap": args.gap, "psf": args.psf}
    io.write_manifest(args.out, command="simulate", argv=args.argv, config=config, seed=seed,
                      inputs={"phantom": args.phantom, "motion": args.motion}, outputs=written)
    return {"out": str(args.out), "stacks": sum(w.startswith("stacks/") for w in written)}


def cmd_reconstruct(args):
    from . import io, pipeline
    from .optim import ReconConfig

    config = ReconConfig.from_dict(_load_json(args.config)) if args.config else ReconConfig()
    if args.deterministic:
        config.deterministic = True
    stacks = pipeline.read_stacks(args.stacks)
    rec = pipeline.reconstruct(stacks, args.mode, config)
    written = pipeline.write_reconstruction(args.out, rec, stacks)
    io.write_manifest(args.out, command="reconstruct", argv=args.argv,
                      config={"mode": args.mode, **config.to_dict()}, seed=args.seed,
                      inputs={"stacks": str(args.stacks), "config": args.config}, outputs=written)
    return {"out": str(args.out), "mode": args.mode,
            "data_consistency": rec.history[-1] if rec.history else None}


REPORT_FIELDS = ["subject", "mode", "tre_median_max", "ssim", "psnr", "ncc", "slice_ssim",
                 "slice_ncc", "slice_psnr", "align_rotation_deg", "align_translation_mm"]


def cmd_evaluate(args):
    from . import io, pipeline

    if len(args.result) != len(args.truth):
        raise ValueError("--result and --truth must be given the same number of times")
    rows = []
    for res_dir, truth_dir in zip(args.result, args.truth):
        res_dir = Path(res_dir)
        manifest = io.read_manifest(res_dir)
        stacks = pipeline.read_stacks(manifest["inputs"]["stacks"])
        volume = io.read_volume(res_dir / "volume")
        poses = io.read_transforms(res_dir / "transforms.json")
        phantom, fields = pipeline.read_truth(truth_dir, len(stacks))
        row = pipeline.evaluate(stacks, volume, poses, fields, phantom, align=args.align)
        row = {"subject": res_dir.name, "mode": manifest["config"].get("mode"), **row}
        rows.append(row)
    names = REPORT_FIELDS + sorted({k for r in rows for k in r} - set(REPORT_FIELDS))
    out = Path(args.out)
    buf = StringIO()
    writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(r.get(k)) for k in names})
    io.atomic_write_bytes(out, buf.getvalue().encode())
    io.write_manifest(out.parent, command="evaluate", argv=args.argv, seed=args.seed,
                      inputs={"result": [str(r) for r in args.result],
                              "truth": [str(t) for t in args.truth]},
                      outputs=[out.name], name=f"{out.stem}.manifest.json")
    return {"out": str(out), "rows": rows}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def cmd_oracle(args):
    from .oracles import CASES, run_case

    names = list(CASES) if args.case == "all" else [args.case]
    results = [run_case(n, seed=args.seed or 0) for n in names]
    ok = all(r["passed"] for r in results)
    return {"cases": results, "passed": ok}, (0 if ok else 1)


def build_parser():
    p = argparse.ArgumentParser(prog="svrecon", description=__doc__.splitlines()[0])
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS; identical flags and seed give identical files")
    p.add_argument("--seed", type=int, default=None)
    sub = p.add_subparsers(dest="verb", required=True, metavar="{simulate,reconstruct,evaluate,oracle}")

    s = sub.add_parser("simulate", help="corrupted stacks and ground truth from a phantom")
    s.add_argument("--phantom", default="ellipsoids", help="ellipsoids|checker|shell or a volume file")
    s.add_argument("--dims", type=int, default=32)
    s.add_argument("--motion", default=None, help="motion config JSON")
    s.add_argument("--thickness", type=float, default=None)
    s.add_argument("--gap", type=float, default=None)
    s.add_argument("--psf", default="boxcar", choices=("boxcar", "gaussian", "thin"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", help="volume and slice poses from stacks")
    r.add_argument("--stacks", required=True, help="directory holding stack_*.json")
    r.add_argument("--mode", default="refine+svr", choices=("init", "refine", "refine+svr"))
    r.add_argument("--config", default=None, help="reconstruction config JSON")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="CSV report of a reconstruction against ground truth")
    e.add_argument("--result", required=True, action="append")
    e.add_argument("--truth", required=True, action="append")
    e.add_argument("--align", default="placements", choices=("placements", "volume", "none"),
                   help="how the global rigid frame is fixed before scoring")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    o = sub.add_parser("oracle", help="run a dense-system or brute-force oracle check")
    o.add_argument("--case", required=True)
    o.set_defaults(func=cmd_oracle)
    return p


def _move_global_flags(argv):
    """Allow ``--deterministic``/``--seed`` after the verb as well as before."""
    out, rest, i = [], [], 0
    while i < len(argv):
        a = argv[i]
        if a == "--deterministic":
            out.append(a)
        elif a == "--seed" and i + 1 < len(argv):
            out += [a, argv[i + 1]]
            i += 1
        elif a.startswith("--seed="):
            out.append(a)
        else:
            rest.append(a)
        i += 1
    return out + rest


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(_move_global_flags(argv))
    args.argv = argv
    threads = os.environ.get(THREADS_ENV)
    limit = 1 if args.deterministic else (int(threads) if threads else None)
    try:
        with _thread_limit(limit):
            out = args.func(args)
        code = 0
        if isinstance(out, tuple):
            out, code = out
        print(json.dumps(out, default=str))
        return code
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error
        payload = exc.to_dict() if hasattr(exc, "to_dict") else {
            "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

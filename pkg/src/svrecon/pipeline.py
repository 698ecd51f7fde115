"""End-to-end orchestration used by the command line: simulate, reconstruct, evaluate."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .geometry import RigidTransform, arun_fit, compose, field_from_transform
from .init_recon import default_geometry, flatten_slices, init_volume
from .metrics import median_max_tre, ncc, psnr, slice_consistency, ssim
from .motion_sim import MotionConfig, simulate
from .optim import ReconConfig, alternating_svr, finalize, multiscale_refine
from .optim.registration import register_volumes
from .optim.svr import SvrResult, slice_psfs
from .phantoms import KINDS, make_phantom
from .sampling import Volume, pull

MODES = ("init", "refine", "refine+svr")


# ---------------------------------------------------------------- simulate

def load_phantom(spec: str, dims=32, seed=0) -> Volume:
    """A procedural phantom name or the path of a volume file."""
    if spec in KINDS:
        return make_phantom(spec, dims, seed)
    return io.read_volume(spec)


def write_simulation(out_dir, phantom: Volume, motion: MotionConfig, *, seed, thickness=None,
                     gap=None, psf_kind="boxcar"):
    """Simulate corrupted stacks and write them plus the ground truth under ``out_dir``."""
    out = Path(out_dir)
    sim = simulate(phantom, motion, seed=seed, thickness=thickness, gap=gap, psf_kind=psf_kind)
    written = []
    for i, (st, gt) in enumerate(zip(sim.stacks, sim.truths)):
        prov = {"seed": seed, "stack": i, "gamma": gt.gamma, "bulk_deg": gt.trajectory.bulk_deg}
        written.append(io.write_stack(out / "stacks" / f"stack_{i:02d}", st, provenance=prov))
        written.append(io.write_transforms(out / "truth" / f"transforms_{i:02d}.json", gt.transforms))
        written.append(io.write_fields(out / "truth" / f"fields_{i:02d}", gt.fields))
    written.append(io.write_volume(out / "truth" / "phantom", phantom))
    io.atomic_write_json(out / "truth" / "motion.json", motion.to_dict())
    return sim, [str(p.relative_to(out)) for p in written]


def read_stacks(stack_dir):
    paths = sorted(Path(stack_dir).glob("stack_*.json"))
    if not paths and (Path(stack_dir) / "stacks").is_dir():
        paths = sorted((Path(stack_dir) / "stacks").glob("stack_*.json"))
    if not paths:
        raise FileNotFoundError(f"no stack_*.json files under {stack_dir}")
    return [io.read_stack(p) for p in paths]


# ------------------------------------------------------------- reconstruct

@dataclass
class Reconstruction:
    volume: Volume
    poses: list
    mode: str
    log: list = field(default_factory=list)
    history: list = field(default_factory=list)


def reconstruct(stacks, mode="refine+svr", config: ReconConfig | None = None) -> Reconstruction:
    """Run one of the three pipeline modes on posed stacks."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    config = config or ReconConfig()
    slices = flatten_slices(stacks)
    if any(s.pose is None for s in slices):
        raise ValueError("every slice needs a prescribed pose")
    grids = [s.grid for s in slices]
    d0, s0 = default_geometry(stacks)
    dims = tuple(config.volume_dims or d0)
    spacing = float(config.volume_spacing or s0)
    psf = slice_psfs(stacks, config.psf, spacing)[0]
    if mode == "init":
        poses = [s.pose for s in slices]
    else:
        levels = multiscale_refine(stacks, None, config, dims=dims, spacing=spacing)
        poses = finalize(levels[-1], grids)
    if mode == "refine+svr":
        fields = [field_from_transform(p, g) for p, g in zip(poses, grids)]
        res: SvrResult = alternating_svr(stacks, fields, config, dims=dims, spacing=spacing)
        return Reconstruction(res.volume, res.poses, mode, res.metrics_log, res.data_consistency_history)
    fields = [field_from_transform(p, g) for p, g in zip(poses, grids)]
    vol = init_volume(stacks, fields, dims, spacing, psf=psf, indicator=config.indicator)
    return Reconstruction(vol, poses, mode)


def write_reconstruction(out_dir, rec: Reconstruction, stacks):
    out = Path(out_dir)
    slices = flatten_slices(stacks)
    written = [io.write_volume(out / "volume", rec.volume),
               io.write_transforms(out / "transforms.json", rec.poses),
               io.write_fields(out / "fields", [field_from_transform(p, s.grid)
                                                for p, s in zip(rec.poses, slices)])]
    lines = "".join(io.canonical_json(r).replace("\n", " ").strip() + "\n" for r in rec.log)
    io.atomic_write_bytes(out / "metrics.jsonl", lines.encode())
    written.append(out / "metrics.jsonl")
    return [str(p.relative_to(out)) for p in written]


# ---------------------------------------------------------------- evaluate

def resample(volume: Volume, transform, like: Volume) -> Volume:
    """``volume`` expressed on the grid of ``like`` when ``x_volume -> transform(x)``."""
    pts = np.argwhere(np.ones(like.dims, dtype=bool)).astype(np.float64)
    data = pull(volume.data, transform.inverse().apply(pts)).reshape(like.dims)
    return Volume(data, like.spacing, like.origin)


def align_to_reference(volume: Volume, reference: Volume):
    """Rigid transform taking reconstruction voxels into the reference frame by image registration."""
    return register_volumes(volume, reference)


def align_by_placements(stacks, rec_poses, truth_fields_per_stack):
    """Least-squares rigid transform taking estimated pixel placements onto the true ones.

    Stacks that all moved leave the reconstruction frame defined only up to
    a global rigid motion; this fixes that gauge before scoring.
    """
    src, dst, start = [], [], 0
    for st, gts in zip(stacks, truth_fields_per_stack):
        for pose, sl, gt in zip(rec_poses[start:start + len(st)], st.slices, gts):
            m = sl.mask.reshape(-1)
            src.append(pose.apply(sl.grid.points())[m])
            dst.append(gt.targets(sl.grid)[m])
        start += len(st)
    r, t = arun_fit(np.concatenate(src), np.concatenate(dst))
    return RigidTransform(r, t)


ALIGN_MODES = ("placements", "volume", "none")


def evaluate(stacks, rec_volume: Volume, rec_poses, truth_fields_per_stack, phantom: Volume, *,
             align="placements"):
    """One report row: slice TRE, volume similarity and slice consistency.

    ``align`` picks how the global rigid gauge is removed before scoring:
    from the slice placements (default), by registering the volumes, or not at all.
    """
    if align not in ALIGN_MODES:
        raise ValueError(f"align must be one of {ALIGN_MODES}")
    transform = None
    if align == "placements":
        transform = align_by_placements(stacks, rec_poses, truth_fields_per_stack)
    elif align == "volume":
        transform = align_to_reference(rec_volume, phantom)
    poses = [compose(transform, p) for p in rec_poses] if transform else list(rec_poses)
    vol = resample(rec_volume, transform, phantom) if transform else rec_volume
    est, masks, start = [], [], 0
    for st in stacks:
        est.append([field_from_transform(p, s.grid) for p, s in zip(poses[start:start + len(st)], st.slices)])
        masks.append([s.mask for s in st.slices])
        start += len(st)
    per_stack, mean_tre = median_max_tre(est, truth_fields_per_stack, float(phantom.spacing[0]), masks)
    consistency = slice_consistency(stacks, SvrResult(rec_volume, list(rec_poses)))
    row = {
        "tre_median_max": mean_tre,
        "ssim": ssim(phantom, vol),
        "psnr": psnr(phantom, vol),
        "ncc": ncc(phantom, vol),
        "slice_ssim": consistency.ssim,
        "slice_ncc": consistency.ncc,
        "slice_psnr": consistency.psnr,
    }
    for i, v in enumerate(per_stack):
        row[f"tre_stack_{i}"] = v
    if transform is not None:
        row["align_rotation_deg"] = float(np.linalg.norm(transform.rotvec_deg()))
        row["align_translation_mm"] = float(np.linalg.norm(transform.translation) * phantom.spacing[0])
    return row


def read_truth(truth_dir, n_stacks):
    truth = Path(truth_dir)
    if (truth / "truth").is_dir():
        truth = truth / "truth"
    phantom = io.read_volume(truth / "phantom")
    fields = [io.read_fields(truth / f"fields_{i:02d}") for i in range(n_stacks)]
    return phantom, fields


__all__ = ["MODES", "load_phantom", "write_simulation", "read_stacks", "Reconstruction",
           "reconstruct", "write_reconstruction", "resample", "align_to_reference", "align_by_placements", "evaluate",
           "read_truth"]

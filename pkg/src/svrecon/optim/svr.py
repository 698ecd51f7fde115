"""Alternating volume reconstruction and slice registration."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from scipy.spatial.transform import Rotation

from ..geometry import RigidTransform, compose, field_from_transform, rotation_about
from ..init_recon import default_geometry, flatten_fields, flatten_slices, init_volume
from ..sampling import Volume, make_psf
from .config import ReconConfig
from .refine import finalize
from .registration import PoseResult, register_slice
from .system import SliceSystem, cgls


@dataclass(eq=False)
class SvrResult:
    volume: Volume
    poses: list
    fields_per_level: list = field(default_factory=list)
    data_consistency_history: list = field(default_factory=list)
    slice_scales: np.ndarray = field(default_factory=lambda: np.zeros(0))
    slice_ncc: np.ndarray = field(default_factory=lambda: np.zeros(0))
    metrics_log: list = field(default_factory=list)
    status: str = "ok"

    def fields(self, grids):
        return [field_from_transform(p, g) for p, g in zip(self.poses, grids)]


def slice_psfs(stacks, kind, voxel_spacing):
    out = []
    for st in stacks:
        k = make_psf(kind, st.slice_thickness, st.in_plane_spacing, voxel_spacing)
        out.extend([k] * len(st))
    return out


def _ncc(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / den) if den > 0 else (1.0 if np.array_equal(a, b) else 0.0)


def per_slice_ncc(system: SliceSystem, volume_data):
    return np.array([_ncc(sim, ob) if len(ob) > 1 else 0.0
                     for sim, ob in zip(system.simulate_raw(volume_data), system.observed)])


def _inplane_smooth(volume_data, sigma, pose):
    """Blur the volume within the plane of ``pose`` only (nearest volume axes).

    Matches a 2D blur of the slice, so the smoothed objective keeps its
    minimum at the true pose for near axis-aligned slices.
    """
    if sigma <= 0:
        return volume_data
    s = [sigma] * 3
    s[int(np.argmax(np.abs(pose.rotation[:, 2])))] = 0.0
    return ndimage.gaussian_filter(volume_data, s)


def smooth_slice(sl, sigma):
    """Gaussian-blurred slice for coarse registration; the mask grows with the blur."""
    if sigma <= 0:
        return sl
    m = sl.mask.astype(np.float64)
    data = ndimage.gaussian_filter(sl.data * m, sigma, mode="constant")
    den = ndimage.gaussian_filter(m, sigma, mode="constant")
    return sl.copy(data=data, mask=den > 1e-3)


def _chain(first: PoseResult, second: PoseResult) -> PoseResult:
    return PoseResult(second.pose, first.objective_initial, second.objective,
                      first.iterations + second.iterations, second.status,
                      first.step_deg + second.step_deg, first.step_mm + second.step_mm)


def _smooth_results(results, stacks, slices, sigma, dims):
    center = (np.asarray(dims, dtype=np.float64) - 1) / 2.0
    out = list(results)
    for idx in _stack_groups(stacks):
        prescribed = [slices[i].pose for i in idx]
        if any(p is None for p in prescribed):
            continue
        times = [slices[i].acquisition_time_index for i in idx]
        new = smooth_trajectory([results[i].pose for i in idx], prescribed, times, sigma, center)
        for i, p in zip(idx, new):
            r = results[i]
            out[i] = PoseResult(p, r.objective_initial, r.objective, r.iterations, r.status,
                                r.step_deg, r.step_mm)
    return out


def _stack_groups(stacks):
    out, start = [], 0
    for st in stacks:
        out.append(list(range(start, start + len(st))))
        start += len(st)
    return out


def _register_all(slices, poses, psfs, scales, volume_data, config, groups, *, translation_only,
                  spacing):
    """One registration sweep; each group of slice indices shares a rigid update."""
    stages = tuple(x for x in config.pose_smoothing if x > 0) + (0.0,)
    cache = {}
    out = [None] * len(slices)
    for idx in groups:
        cur = [poses[i] for i in idx]
        res = None
        for sigma in stages:
            axis = int(np.argmax(np.abs(cur[0].rotation[:, 2])))
            key = (sigma, axis if sigma > 0 else -1)
            if key not in cache:
                cache[key] = _inplane_smooth(volume_data, sigma, cur[0])
            sub = [smooth_slice(slices[i], sigma) for i in idx]
            step = register_slice(sub, cache[key], cur, psfs[idx[0]], scale=scales[idx],
                                  config=config, spacing=spacing, voxel_spacing=spacing,
                                  translation_only=translation_only)
            cur = step.pose
            res = step if res is None else _chain(res, step)
        for j, i in enumerate(idx):
            out[i] = PoseResult(res.pose[j], res.objective_initial, res.objective, res.iterations,
                                res.status, res.step_deg, res.step_mm)
    return out


def smooth_trajectory(poses, prescribed, times, sigma, center):
    """Gaussian-smooth the object motion ``pose ∘ prescribed⁻¹`` along acquisition time.

    Motion is parametrized as a rotation vector about ``center`` plus a
    translation; slices without a prescribed pose are left untouched.
    """
    if sigma <= 0 or len(poses) < 2:
        return list(poses)
    order = np.argsort(times, kind="stable")
    params = np.zeros((len(poses), 6))
    for i, (p, q) in enumerate(zip(poses, prescribed)):
        m = p @ q.inverse()
        params[i, :3] = Rotation.from_matrix(m.rotation).as_rotvec()
        params[i, 3:] = m.apply(center) - center
    smoothed = params.copy()
    smoothed[order] = ndimage.gaussian_filter1d(params[order], sigma, axis=0, mode="nearest")
    out = []
    for k, q in zip(smoothed, prescribed):
        m = compose(RigidTransform.from_translation(k[3:]),
                    rotation_about(Rotation.from_rotvec(k[:3]).as_matrix(), center))
        out.append(m @ q)
    return out


def alternating_svr(stacks, init_fields=None, config: ReconConfig | None = None, *, dims=None,
                    spacing=None, log=None, fields_per_level=None) -> SvrResult:
    """Coordinate descent on ``Σ‖I_n − s_n M(F_n) V‖²``.

    Each outer iteration runs ``inner_recon_iters`` CG steps on the volume,
    refits slice scales, registers every slice, and refits scales again, so
    the recorded data consistency never increases. ``log`` receives one JSON
    line per iteration when given a writable text stream.

    With ``config.leave_one_out`` each stack is registered against a volume
    fitted to the other stacks. That removes the pull of a slice towards
    its own contribution and converges from much larger motion, but it is
    no longer a descent method, so the history may rise.
    """
    config = config or ReconConfig()
    d0, s0 = default_geometry(stacks)
    dims = tuple(dims or config.volume_dims or d0)
    spacing = float(spacing or config.volume_spacing or s0)
    slices = flatten_slices(stacks)
    if init_fields is None:
        poses = [s.pose for s in slices]
    else:
        poses = finalize(flatten_fields(stacks, init_fields), [s.grid for s in slices])
    psfs = slice_psfs(stacks, config.psf, spacing)

    fields = [field_from_transform(p, s.grid) for p, s in zip(poses, slices)]
    # PSF-weighted splat; stacks with different thickness share one kernel here
    vol = init_volume(stacks, fields, dims, spacing, psf=psfs[0], indicator=config.indicator)
    system = SliceSystem(slices, poses, psfs, dims, None, spacing)
    system.fit_scales(vol.data)
    history = [system.residual_norm2(vol.data)]
    records = []

    for it in range(config.outer_iters):
        data, _ = cgls(system, vol.data, config.inner_recon_iters, config.cg_tol)
        vol = vol.with_data(data)
        scales = system.fit_scales(vol.data)

        grouped = it < config.stack_iters
        tonly = it < config.translation_iters
        if config.leave_one_out and len(stacks) > 1:
            # each stack registers to a volume fitted to the other stacks only
            results = [None] * len(slices)
            for idx in _stack_groups(stacks):
                rest = np.setdiff1d(np.arange(len(slices)), idx)
                sub = SliceSystem([slices[i] for i in rest], [poses[i] for i in rest],
                                  [psfs[i] for i in rest], dims, scales[rest], spacing)
                ref, _ = cgls(sub, vol.data, config.inner_recon_iters, config.cg_tol)
                groups = [idx] if grouped else [[i] for i in idx]
                part = _register_all(slices, poses, psfs, scales, ref, config, groups,
                                     translation_only=tonly, spacing=spacing)
                for i in idx:
                    results[i] = part[i]
        else:
            groups = _stack_groups(stacks) if grouped else [[i] for i in range(len(slices))]
            results = _register_all(slices, poses, psfs, scales, vol.data, config, groups,
                                    translation_only=tonly, spacing=spacing)
        if config.trajectory_smoothing > 0:
            results = _smooth_results(results, stacks, slices, config.trajectory_smoothing, dims)
        if (not config.leave_one_out or len(stacks) < 2) and (
                config.pose_smoothing or grouped or config.trajectory_smoothing > 0):
            # these stages may raise a group's objective: keep the old poses then
            trial = SliceSystem(slices, [r.pose for r in results], psfs, dims, scales, spacing)
            per_new = trial.per_slice_residual(vol.data)
            per_old = system.per_slice_residual(vol.data)
            for idx in groups:
                if per_new[idx].sum() > per_old[idx].sum():
                    for i in idx:
                        results[i] = PoseResult(poses[i], per_old[i], per_old[i], 0, "rejected")
        poses = [r.pose for r in results]
        system = SliceSystem(slices, poses, psfs, dims, scales, spacing)
        system.fit_scales(vol.data)
        dc = system.residual_norm2(vol.data)
        history.append(dc)
        ncc = per_slice_ncc(system, vol.data)
        rec = {
            "iteration": it + 1,
            "data_consistency": dc,
            "mean_pose_step_deg": float(np.mean([r.step_deg for r in results])),
            "mean_pose_step_mm": float(np.mean([r.step_mm for r in results])),
            "slice_ncc": [round(float(x), 6) for x in ncc],
        }
        records.append(rec)
        if log is not None:
            log.write(json.dumps(rec) + "\n")

    scales = system.scales
    mean_scale = float(np.mean(scales)) if len(scales) else 1.0
    if mean_scale > 0:
        vol = vol.with_data(vol.data * mean_scale)
        scales = scales / mean_scale
    return SvrResult(vol, poses, fields_per_level or [], history, scales,
                     per_slice_ncc(system, vol.data / mean_scale if mean_scale > 0 else vol.data),
                     records)

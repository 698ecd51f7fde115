"""Coarse-to-fine displacement refinement, rigid finalization and the level loss."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..forward_model import Slice, SliceStack, simulate_slice_field
from ..geometry import (DegenerateGeometryError, DisplacementField, PixelGrid, RigidTransform,
                        field_from_transform, level_factor, level_grid, project_to_rigid,
                        upsample_field)
from ..init_recon import default_geometry, flatten_slices, init_volume
from ..sampling import make_boxcar_psf
from .config import ReconConfig
from .flow import flow_confidence, flow_residual


MIN_LEVEL_DIM = 32  # coarser levels are skipped
PYRAMID_SIGMA = 0.5  # anti-alias blur per unit of downsampling factor
LEAVE_STACK_OUT = True
CONFIDENCE_WEIGHTS = True
ACCEPT_GAIN = 0.0  # relative mismatch decrease required to move a slice


def downsample_slice(sl: Slice, factor: int) -> Slice:
    """Keep every ``factor``-th pixel after mask-normalized Gaussian smoothing.

    Level pixel ``q`` sits exactly on full-resolution pixel ``factor·q``.
    """
    if factor == 1:
        return sl
    grid = level_grid(sl.grid, factor)
    sigma = PYRAMID_SIGMA * factor
    m = sl.mask.astype(np.float64)
    num = ndimage.gaussian_filter(sl.data * m, sigma, mode="constant")
    den = ndimage.gaussian_filter(m, sigma, mode="constant")
    data = np.where(den > 1e-6, num / np.maximum(den, 1e-6), 0.0)[::factor, ::factor]
    mask = (den > 0.5)[::factor, ::factor]
    return Slice(grid, data, mask, sl.index_in_stack, sl.acquisition_time_index, status=sl.status)


def _blur_through_plane(st: SliceStack, factor: int):
    """Mask-normalized Gaussian across neighbouring slices of a stack.

    Pairs with the in-plane blur of ``downsample_slice`` so coarse slices from
    differently oriented stacks see the same 3D-smoothed object.
    """
    sigma = PYRAMID_SIGMA * factor * st.in_plane_spacing / st.slice_gap
    if len(st) < 2 or sigma < 0.25:
        return st.slices
    order = np.argsort([s.index_in_stack for s in st.slices], kind="stable")
    m = np.stack([st.slices[i].mask for i in order]).astype(np.float64)
    d = np.stack([st.slices[i].data for i in order]) * m
    num = ndimage.gaussian_filter1d(d, sigma, axis=0, mode="constant")
    den = ndimage.gaussian_filter1d(m, sigma, axis=0, mode="constant")
    blurred = np.where(den > 1e-6, num / np.maximum(den, 1e-6), 0.0)
    out = list(st.slices)
    for j, i in enumerate(order):
        sl = st.slices[i]
        out[i] = sl.copy(data=np.where(sl.mask, blurred[j], sl.data))
    return out


def downsample_stacks(stacks, factor):
    out = []
    for st in stacks:
        src = _blur_through_plane(st, factor) if factor > 1 else st.slices
        slices = [downsample_slice(s, factor) for s in src]
        out.append(SliceStack(slices, st.orientation_label, st.slice_thickness,
                              st.in_plane_spacing * factor, st.slice_gap))
    return out


def level_pose(pose: RigidTransform, factor: int) -> RigidTransform:
    """Pose in level units: ``S⁻¹ F S`` with ``S`` the uniform scale ``factor``."""
    return RigidTransform(pose.rotation, pose.translation / factor)


def level_dims(dims, factor):
    return tuple((int(d) - 1) // factor + 1 for d in dims)


def prescribed_level_fields(stacks, level, n_levels):
    k = level_factor(level, n_levels)
    out = []
    for st in stacks:
        g = level_grid(st.grid, k)
        out.extend(field_from_transform(level_pose(s.pose, k), g, level) for s in st.slices)
    return out


def _safe_rigid(field, grid, mask=None, weights=None):
    try:
        return project_to_rigid(field, grid, mask, weights)
    except DegenerateGeometryError:
        return None


def _blur(sl, sigma):
    """Mask-normalized Gaussian blur; the mask is unchanged."""
    if sigma <= 0:
        return sl
    m = sl.mask.astype(np.float64)
    num = ndimage.gaussian_filter(sl.data * m, sigma, mode="constant")
    den = ndimage.gaussian_filter(m, sigma, mode="constant")
    return sl.copy(data=np.where(sl.mask, num / np.maximum(den, 1e-12), 0.0))


def _mismatch(vol, field, sl, sim=None):
    sim = sim if sim is not None else simulate_slice_field(vol, field, sl.grid)
    m = sim.mask & sl.mask
    if not m.any():
        return np.inf
    return float(np.mean((sim.data[m] - sl.data[m]) ** 2))


def refine_level(stacks_s, fields, dims_s, spacing_s, config: ReconConfig, level=0):
    """One build/simulate/update pass at a single pyramid level."""
    thick = [st.slice_thickness for st in stacks_s for _ in st.slices]
    psf = make_boxcar_psf(min(thick), spacing_s)
    multi = len(stacks_s) > 1
    full = init_volume(stacks_s, fields, dims_s, spacing_s, psf=psf, indicator=config.indicator)
    targets = [full] * len(fields)
    if multi and LEAVE_STACK_OUT:
        # each stack is compared with a volume built from the other stacks only
        start = 0
        for i, st in enumerate(stacks_s):
            others = [s for j, s in enumerate(stacks_s) if j != i]
            idx = [j for j in range(len(fields)) if not start <= j < start + len(st)]
            vol = init_volume(others, [fields[j] for j in idx], dims_s, spacing_s, psf=psf,
                              indicator=config.indicator)
            targets[start:start + len(st)] = [vol] * len(st)
            start += len(st)
    out = []
    for sl, f, vol in zip(flatten_slices(stacks_s), fields, targets):
        grid = sl.grid
        rigid = _safe_rigid(f, grid)
        if not sl.mask.any() or rigid is None:
            out.append(f)
            continue
        sim = simulate_slice_field(vol, f, grid)
        probes = None
        normal = rigid.rotation[:, 2]
        if multi:
            probes = tuple(simulate_slice_field(vol, DisplacementField(f.data + sgn * normal), grid)
                           for sgn in (-1.0, 1.0))
        sig = config.flow_smoothing
        if sig > 0:
            probes = probes and tuple(_blur(p, sig) for p in probes)
        sim_b, obs_b = _blur(sim, sig), _blur(sl, sig)
        delta = flow_residual(sim_b, obs_b, config.max_disp, probes=probes,
                              window=config.flow_window, damping=config.flow_damping)
        step = delta.data @ rigid.rotation.T
        new = DisplacementField(f.data + step, level)
        if config.rigid_updates:
            support = sl.mask & sim.mask
            # flat regions carry no flow: weight the fit by gradient energy
            conf = flow_confidence(sim_b, obs_b, config.flow_window) if CONFIDENCE_WEIGHTS else None
            fit = _safe_rigid(new, grid, support, conf) if support.sum() >= 3 else None
            new = field_from_transform(fit, grid, level) if fit is not None else f
            # the rigid fit may amplify the clamped residual: keep it in the same bound
            if np.linalg.norm(new.data - f.data, axis=-1)[support].max(initial=0.0) > config.max_disp:
                new = f
            # keep the update only if it clearly lowers the mean squared mismatch
            if _mismatch(vol, new, sl) > (1.0 - ACCEPT_GAIN) * _mismatch(vol, f, sl, sim):
                new = f
        out.append(new)
    return out


def multiscale_refine(stacks, init_fields_coarsest=None, config: ReconConfig | None = None, *,
                      dims=None, spacing=None):
    """Refine slice fields from the coarsest pyramid level to full resolution.

    Returns a list (one entry per level, coarsest first) of per-slice fields
    expressed in that level's voxel units.
    """
    config = config or ReconConfig()
    d0, s0 = default_geometry(stacks)
    dims = tuple(dims or config.volume_dims or d0)
    spacing = float(spacing or config.volume_spacing or s0)
    n_levels = config.pyramid_levels
    slices = flatten_slices(stacks)
    fields = list(init_fields_coarsest) if init_fields_coarsest is not None else \
        prescribed_level_fields(stacks, 0, n_levels)
    # rigid poses (full-resolution voxels) carried across levels too coarse to refine;
    # upsampling fields from grids of a pixel or two would lose the rotation
    carried = _full_res_poses(fields, slices, level_factor(0, n_levels))
    history = []
    for level in range(n_levels):
        k = level_factor(level, n_levels)
        stacks_s = downsample_stacks(stacks, k)
        grids = [s.grid for s in flatten_slices(stacks_s)]
        if carried is not None:
            fields = [field_from_transform(level_pose(p, k), g, level) for p, g in zip(carried, grids)]
        elif level > 0:
            fields = [upsample_field(f, g, 2) for f, g in zip(fields, grids)]
            fields = [DisplacementField(f.data, level) for f in fields]
        if level < n_levels - 1 and min(level_dims(dims, k)) < MIN_LEVEL_DIM:
            history.append(fields)
            continue
        carried = None
        for _ in range(config.refine_iters_per_level):
            fields = refine_level(stacks_s, fields, level_dims(dims, k), spacing * k, config, level)
        history.append(fields)
    return history


def _full_res_poses(fields, slices, factor):
    out = []
    for f, sl in zip(fields, slices):
        grid = level_grid(sl.grid, factor)
        fit = _safe_rigid(f, grid) if grid.width * grid.height >= 3 else None
        if fit is None:
            fit = sl.pose
        else:
            fit = RigidTransform(fit.rotation, fit.translation * factor)
        out.append(fit)
    return out


def finalize(fields_full_res, grid=None):
    """Closest rigid pose per slice; ``grid`` may be one grid or one per field."""
    out = []
    for i, f in enumerate(fields_full_res):
        g = grid[i] if isinstance(grid, (list, tuple)) else grid
        out.append(project_to_rigid(f, g or PixelGrid(f.width, f.height)))
    return out


def uplift_level_field(field: DisplacementField, full: PixelGrid, factor: int) -> DisplacementField:
    """Level field on the full-resolution grid, displacements scaled by ``factor``."""
    return upsample_field(field, full, factor)


def multilayer_residual_loss(fields_per_level, gt_fields) -> float:
    """``Σ_n ‖f_GT,n − mean_s uplift(f_n^s)‖²`` over all pixels."""
    n_levels = len(fields_per_level)
    total = 0.0
    for n, gt in enumerate(gt_fields):
        full = PixelGrid(gt.width, gt.height)
        acc = np.zeros_like(gt.data)
        for s, level in enumerate(fields_per_level):
            k = level_factor(s, n_levels)
            if (level[n].width, level[n].height) != level_grid(full, k).shape:
                raise ValueError("level field does not match the ground-truth grid")
            up = uplift_level_field(level[n], full, k)
            acc += up.data
        total += float(np.sum((gt.data - acc / n_levels) ** 2))
    return total

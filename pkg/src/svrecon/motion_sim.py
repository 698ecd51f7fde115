"""Synthetic ground truth: ideal stack extraction and motion/intensity corruption.

Randomness comes from numpy's Philox counter-based generator; every public
entry point takes an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .forward_model import Slice, SliceStack, simulate_slice_psf
from .geometry import (DisplacementField, PixelGrid, RigidTransform, compose,
                       field_from_transform, interpolate_rigid_trajectory,
                       orientation, prescribed_pose_matrix, rotation_about)
from .sampling import Volume, make_psf

FOREGROUND_EPS = 1e-6
FOREGROUND_MARGIN = 3  # pixels of background kept around the object in slice masks
STANDARD_VIEWS = ("sagittal", "coronal", "axial")


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class MotionConfig:
    bulk_inplane_rot_range: float = 12.0  # degrees, symmetric
    n_perturbations: tuple = (1, 100)
    rot_sigma: float = 20.0  # degrees
    trans_range: float = 6.1  # mm, symmetric
    noise_sigma: float = 0.0  # fraction of the foreground intensity range
    bias_amplitude: float = 0.0
    gamma_range: tuple = (1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.n_perturbations = tuple(int(k) for k in self.n_perturbations)
        self.gamma_range = tuple(float(g) for g in self.gamma_range)
        lo, hi = self.n_perturbations
        if lo < 1 or hi < lo:
            raise ValueError("n_perturbations must satisfy 1 <= lo <= hi")
        if self.gamma_range[0] <= 0 or self.gamma_range[1] < self.gamma_range[0]:
            raise ValueError("gamma_range must be a positive interval")
        for name in ("bulk_inplane_rot_range", "rot_sigma", "trans_range",
                     "noise_sigma", "bias_amplitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(eq=False)
class MotionTrajectory:
    """Per-slice object motion plus one in-plane bulk rotation for the stack."""

    transforms: list  # RigidTransform per slice; rotation vector about the volume center, translation in mm
    bulk_deg: float = 0.0
    keyframe_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    keyframe_params: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))

    def __len__(self):
        return len(self.transforms)


@dataclass(eq=False)
class GroundTruth:
    transforms: list  # true slice poses (slice frame -> volume voxels)
    fields: list  # full-resolution DisplacementField per slice
    clean: SliceStack  # moved slices before intensity corruption
    corrupted: SliceStack
    trajectory: MotionTrajectory | None = None
    gamma: float = 1.0


def stack_geometry(dims, label, gap_vox):
    """Prescribed poses of a stack through a cubic volume.

    Slices are spaced ``gap_vox`` apart along the stack normal and centered
    in the volume; the orientation rotates about the volume center.
    """
    n = dims[0]
    if len(set(dims)) != 1:
        raise ValueError("stack extraction needs a cubic volume")
    grid = PixelGrid(n, n)
    count = int(np.floor((n - 1) / gap_vox + 1e-9)) + 1
    offset = ((n - 1) - (count - 1) * gap_vox) / 2.0
    center = np.full(3, (n - 1) / 2.0)
    rot = orientation(label)
    poses = []
    for k in range(count):
        t = RigidTransform.from_translation((0.0, 0.0, offset + k * gap_vox))
        poses.append(RigidTransform.from_matrix(prescribed_pose_matrix(t, rot, grid, center=center)))
    return grid, poses


def extract_stacks(phantom: Volume, orientations=STANDARD_VIEWS, in_plane_spacing=None,
                   thickness=None, gap=None, psf_kind="boxcar"):
    """Motion-free stacks simulated from ``phantom`` at prescribed poses."""
    vox = float(phantom.spacing[0])
    in_plane_spacing = vox if in_plane_spacing is None else float(in_plane_spacing)
    if not np.allclose(phantom.spacing, vox) or abs(in_plane_spacing - vox) > 1e-12:
        raise ValueError("stack extraction requires isotropic voxels matching the in-plane spacing")
    thickness = vox if thickness is None else float(thickness)
    gap = thickness if gap is None else float(gap)
    psf = make_psf(psf_kind, thickness, in_plane_spacing, vox)
    stacks = []
    for label in orientations:
        grid, poses = stack_geometry(phantom.dims, label, gap / vox)
        grid = PixelGrid(grid.width, grid.height, in_plane_spacing)
        slices = []
        for k, pose in enumerate(poses):
            sim = simulate_slice_psf(phantom, pose, grid, psf)
            mask = foreground_mask(sim)
            slices.append(Slice(grid, sim.data, mask, index_in_stack=k,
                                acquisition_time_index=k, pose=pose))
        if not any(s.mask.any() for s in slices):
            raise ValueError(f"{label} stack does not overlap the phantom")
        stacks.append(SliceStack(slices, label, thickness, in_plane_spacing, gap))
    return stacks


def foreground_mask(sim: Slice, margin=None) -> np.ndarray:
    """In-bounds pixels within ``margin`` pixels of nonzero signal."""
    margin = FOREGROUND_MARGIN if margin is None else int(margin)
    fg = sim.data > FOREGROUND_EPS
    if margin > 0 and fg.any():
        fg = ndimage.binary_dilation(fg, iterations=margin)
    return sim.mask & fg


def draw_keyframes(config: MotionConfig, rng, count):
    """``(count, 6)`` keyframe parameters: rotation vector (deg), translation (mm)."""
    rot = rng.normal(0.0, config.rot_sigma, size=(count, 3))
    a = config.trans_range
    trans = rng.uniform(-a, a, size=(count, 3))
    return np.concatenate([rot, trans], axis=1)


def draw_motion_params(config: MotionConfig, rng):
    """Keyframe parameters ``(count, 6)`` and the stack's bulk in-plane rotation (deg)."""
    lo, hi = config.n_perturbations
    count = int(rng.integers(lo, hi + 1))
    params = draw_keyframes(config, rng, count)
    b = config.bulk_inplane_rot_range
    bulk = float(rng.uniform(-b, b)) if b > 0 else 0.0
    return params, bulk


def sample_motion(config: MotionConfig, n_slices: int, rng) -> MotionTrajectory:
    if n_slices < 1:
        raise ValueError("n_slices must be >= 1")
    params, bulk = draw_motion_params(config, rng)
    count = len(params)
    times = np.linspace(0.0, n_slices - 1, count) if count > 1 else np.zeros(1)
    keys = [(t, RigidTransform.from_params(p[:3], p[3:])) for t, p in zip(times, params)]
    transforms = interpolate_rigid_trajectory(keys, np.arange(n_slices, dtype=np.float64))
    return MotionTrajectory(transforms, bulk, times, params)


def moved_pose(prescribed: RigidTransform, motion: RigidTransform, bulk_deg, grid: PixelGrid,
               center, spacing):
    """True pose: object motion (about ``center``) after an in-plane bulk rotation."""
    obj = compose(RigidTransform.from_translation(motion.translation / spacing),
                  rotation_about(motion.rotation, center))
    pose = compose(obj, prescribed)
    if bulk_deg:
        c = np.append(grid.center, 0.0)
        spin = rotation_about(RigidTransform.from_params((0.0, 0.0, bulk_deg)).rotation, c)
        pose = compose(pose, spin)
    return pose


def _bias_field(grid, amplitude, rng):
    u, v = np.meshgrid(np.linspace(-1, 1, grid.width), np.linspace(-1, 1, grid.height), indexing="ij")
    terms = np.stack([u, v, u * u, u * v, v * v])
    poly = np.tensordot(rng.uniform(-1, 1, len(terms)), terms, axes=1)
    peak = np.abs(poly).max()
    if peak == 0:
        return np.ones(grid.shape)
    return 1.0 + amplitude * poly / peak


def corrupt_stack(stack: SliceStack, trajectory: MotionTrajectory, config: MotionConfig, rng, *,
                  phantom: Volume, psf_kind="boxcar"):
    """Move every slice along ``trajectory`` and then degrade its intensities.

    Order of intensity corruption: additive noise, multiplicative bias,
    gamma remap. Geometry is recorded before any intensity change.
    """
    if len(trajectory) != len(stack):
        raise ValueError("trajectory length differs from slice count")
    vox = float(phantom.spacing[0])
    psf = make_psf(psf_kind, stack.slice_thickness, stack.in_plane_spacing, vox)
    center = phantom.center
    grid = stack.grid
    poses, fields, clean = [], [], []
    for sl, motion in zip(stack.slices, trajectory.transforms):
        pose = moved_pose(sl.pose, motion, trajectory.bulk_deg, grid, center, vox)
        sim = simulate_slice_psf(phantom, pose, grid, psf)
        mask = foreground_mask(sim)
        poses.append(pose)
        fields.append(field_from_transform(pose, grid))
        clean.append(sl.copy(data=sim.data, mask=mask))

    fg = np.concatenate([s.data[s.mask] for s in clean]) if clean else np.zeros(0)
    span = float(fg.max() - fg.min()) if fg.size else 0.0
    sigma = config.noise_sigma * span
    lo, hi = config.gamma_range
    gamma = float(rng.uniform(lo, hi)) if hi > lo else lo
    peak = float(np.abs(fg).max()) if fg.size else 1.0
    corrupted = []
    for s in clean:
        d = s.data.copy()
        if sigma > 0:
            d = d + rng.normal(0.0, sigma, size=d.shape)
        if config.bias_amplitude > 0:
            d = d * _bias_field(s.grid, config.bias_amplitude, rng)
        if gamma != 1.0 and peak > 0:
            d = np.sign(d) * peak * (np.abs(d) / peak) ** gamma
        corrupted.append(s.copy(data=d))

    def _stack(slices):
        return SliceStack(slices, stack.orientation_label, stack.slice_thickness,
                          stack.in_plane_spacing, stack.slice_gap)

    truth = GroundTruth(poses, fields, _stack(clean), _stack(corrupted), trajectory, gamma)
    return truth.corrupted, truth


@dataclass(eq=False)
class Simulation:
    phantom: Volume
    prescribed: list  # motion-free stacks
    stacks: list  # corrupted stacks (inputs to reconstruction)
    truths: list  # GroundTruth per stack
    seed: int = 0


def simulate(phantom: Volume, config: MotionConfig, *, seed=None, thickness=None, gap=None,
             orientations=STANDARD_VIEWS, psf_kind="boxcar") -> Simulation:
    """Extract the standard stacks and corrupt each with its own derived seed."""
    seed = config.seed if seed is None else seed
    prescribed = extract_stacks(phantom, orientations, thickness=thickness, gap=gap, psf_kind=psf_kind)
    children = np.random.SeedSequence(seed).spawn(len(prescribed))
    stacks, truths = [], []
    for st, ss in zip(prescribed, children):
        rng = np.random.Generator(np.random.Philox(ss))
        traj = sample_motion(config, len(st), rng)
        out, gt = corrupt_stack(st, traj, config, rng, phantom=phantom, psf_kind=psf_kind)
        stacks.append(out)
        truths.append(gt)
    return Simulation(phantom, prescribed, stacks, truths, seed)


def truth_fields(truths):
    return [f for gt in truths for f in gt.fields]


def prescribed_fields(stacks):
    return [field_from_transform(s.pose, s.grid) for st in stacks for s in st.slices]


__all__ = [
    "MotionConfig", "MotionTrajectory", "GroundTruth", "Simulation", "extract_stacks",
    "sample_motion", "corrupt_stack", "simulate", "draw_keyframes", "make_rng",
    "stack_geometry", "draw_motion_params", "moved_pose", "truth_fields", "prescribed_fields",
]

"""Slice simulation from a volume: PSF model and displacement-field model."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import DisplacementField, PixelGrid, RigidTransform
from .sampling import PsfKernel, Volume, pull, thin_psf

MASK_COVERAGE = 0.5
DENSE_VOXEL_LIMIT = 4096


@dataclass(eq=False)
class Slice:
    grid: PixelGrid
    data: np.ndarray
    mask: np.ndarray | None = None
    index_in_stack: int = 0
    acquisition_time_index: int = 0
    pose: RigidTransform | None = None  # prescribed placement, if known
    status: str = "ok"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.grid.shape:
            raise ValueError(f"slice data {self.data.shape} does not match grid {self.grid.shape}")
        if self.mask is None:
            self.mask = np.ones(self.grid.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.grid.shape:
            raise ValueError("slice mask does not match grid")
        self.data = np.where(self.mask, self.data, 0.0)

    def copy(self, **changes):
        kw = dict(grid=self.grid, data=self.data.copy(), mask=self.mask.copy(),
                  index_in_stack=self.index_in_stack,
                  acquisition_time_index=self.acquisition_time_index,
                  pose=self.pose, status=self.status)
        kw.update(changes)
        return Slice(**kw)


@dataclass(eq=False)
class SliceStack:
    slices: list
    orientation_label: str
    slice_thickness: float
    in_plane_spacing: float = 1.0
    slice_gap: float | None = None

    def __post_init__(self):
        if not self.slice_thickness > 0:
            raise ValueError("slice thickness must be positive")
        if self.slice_gap is None:
            self.slice_gap = self.slice_thickness
        grids = {s.grid for s in self.slices}
        if len(grids) > 1:
            raise ValueError("all slices of a stack must share one grid")

    @property
    def grid(self) -> PixelGrid:
        return self.slices[0].grid

    def __len__(self):
        return len(self.slices)

    def __iter__(self):
        return iter(self.slices)


def slice_points(grid: PixelGrid, voxel_spacing=None):
    """Slice-frame coordinates of every pixel, in volume voxel units."""
    pts = grid.points()
    if voxel_spacing is not None and grid.spacing != voxel_spacing:
        pts = pts * (grid.spacing / voxel_spacing)
    return pts


def psf_coords(pose: RigidTransform, grid: PixelGrid, psf: PsfKernel, voxel_spacing=None):
    """Sample positions, shape ``(n_pixels, n_taps, 3)``."""
    centers = pose.apply(slice_points(grid, voxel_spacing))
    return centers[:, None, :] + psf.world_offsets(pose.rotation)[None, :, :]


def simulate_slice_psf(volume: Volume, pose: RigidTransform, grid: PixelGrid,
                       psf: PsfKernel | None = None) -> Slice:
    """PSF-weighted slice prediction ``M(F) V``.

    The mask keeps pixels whose in-bounds tap weight is at least one half.
    """
    psf = psf or thin_psf()
    x = psf_coords(pose, grid, psf, volume.spacing[0])
    vals, inb = pull(volume, x.reshape(-1, 3), return_inbounds=True)
    vals = vals.reshape(-1, psf.ntaps) @ psf.weights
    cover = inb.reshape(-1, psf.ntaps).astype(np.float64) @ psf.weights
    mask = (cover >= MASK_COVERAGE).reshape(grid.shape)
    return _finish(grid, vals.reshape(grid.shape), mask, pose)


def simulate_slice_field(volume: Volume, field: DisplacementField, grid: PixelGrid | None = None) -> Slice:
    """Thin-slice prediction ``V*(p↑ + f(p), V)``."""
    grid = grid or PixelGrid(field.width, field.height)
    vals, inb = pull(volume, field.targets(grid), return_inbounds=True)
    return _finish(grid, vals.reshape(grid.shape), inb.reshape(grid.shape), None)


def _finish(grid, data, mask, pose):
    status = "ok"
    if not mask.any():
        warnings.warn("simulated slice does not overlap the volume", RuntimeWarning, stacklevel=3)
        status = "empty"
    return Slice(grid, data, mask, pose=pose, status=status)


def _trilinear_row(row, dims, point, weight):
    """Accumulate trilinear weights of one point into a dense row (loop form)."""
    base = [int(np.floor(c)) for c in point]
    frac = [c - b for c, b in zip(point, base)]
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                idx = (base[0] + a, base[1] + b, base[2] + c)
                if any(i < 0 or i >= n for i, n in zip(idx, dims)):
                    continue
                w = ((frac[0] if a else 1 - frac[0]) * (frac[1] if b else 1 - frac[1])
                     * (frac[2] if c else 1 - frac[2]))
                row[(idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]] += weight * w


def assemble_dense_system(volume_dims, poses, grids, psf: PsfKernel | None = None,
                          slices=None, voxel_spacing=None):
    """Explicit slicing matrix for tiny problems.

    Returns ``(A, b)`` where row ``i`` of ``A`` maps ``vec(V)`` (C order of
    ``data[x, y, z]``) to pixel ``i`` of the concatenated slices, and ``b``
    stacks the data of ``slices`` when given (else ``None``).
    """
    dims = tuple(int(d) for d in volume_dims)
    nvox = int(np.prod(dims))
    if nvox > DENSE_VOXEL_LIMIT:
        raise ValueError(f"dense system limited to {DENSE_VOXEL_LIMIT} voxels, got {nvox}")
    psf = psf or thin_psf()
    if isinstance(grids, PixelGrid):
        grids = [grids] * len(poses)
    rows = []
    for pose, grid in zip(poses, grids):
        taps = psf_coords(pose, grid, psf, voxel_spacing)
        for pix in taps:
            row = np.zeros(nvox)
            for pt, w in zip(pix, psf.weights):
                _trilinear_row(row, dims, pt, w)
            rows.append(row)
    a = np.array(rows)
    b = None
    if slices is not None:
        b = np.concatenate([np.asarray(s.data if isinstance(s, Slice) else s).reshape(-1) for s in slices])
    return a, b

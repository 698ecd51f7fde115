"""Trilinear push (splat) and pull (sample) operators and PSF kernels.

``push`` with unit values is the exact adjoint of ``pull``: both use zero
padding and drop each of the eight trilinear corners independently when it
falls outside the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend

COVERAGE_EPS = 1e-8
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
GAUSS_TRUNCATE = 2.5


@dataclass(eq=False)
class Volume:
    """Scalar voxel grid with a contribution weight per voxel.

    ``weight`` doubles as the splat accumulator's denominator and as the
    coverage record: voxels with ``weight <= COVERAGE_EPS`` are uncovered.
    A volume built directly from data defaults to full coverage.
    """

    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("volume data must be 3D")
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=np.float64), (3,)).copy()
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3).copy()
        if np.any(self.spacing <= 0):
            raise ValueError("voxel spacing must be positive")
        if self.weight is None:
            self.weight = np.ones_like(self.data)
        else:
            self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
            if self.weight.shape != self.data.shape:
                raise ValueError("weight and data dimensions differ")

    @classmethod
    def empty(cls, dims, spacing=1.0, origin=(0.0, 0.0, 0.0)):
        dims = tuple(int(d) for d in dims)
        return cls(np.zeros(dims), spacing, origin, np.zeros(dims))

    @property
    def dims(self):
        return self.data.shape

    @property
    def covered(self):
        return self.weight > COVERAGE_EPS

    @property
    def center(self):
        return (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0

    def copy(self):
        return Volume(self.data.copy(), self.spacing, self.origin, self.weight.copy())

    def with_data(self, data):
        return Volume(data, self.spacing, self.origin, self.weight.copy())


@dataclass(frozen=True)
class PushStats:
    samples: int
    dropped: int


def _coords(coords):
    c = np.ascontiguousarray(coords, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ValueError("coordinates must have shape (N, 3)")
    return c


def pull(source: Volume | np.ndarray, coords, *, return_inbounds=False, backend=None):
    """Trilinear samples of ``source`` at voxel coordinates ``coords``."""
    data = source.data if isinstance(source, Volume) else np.ascontiguousarray(source, dtype=np.float64)
    k = _backend.get(backend) if backend else _backend.kernels
    values, inb = k.pull(data, _coords(coords))
    return (values, inb) if return_inbounds else values


def push(target: Volume, coords, values, *, weights=None, indicator=False,
         accumulate_weight=True, backend=None) -> PushStats:
    """Splat ``values`` into ``target`` in place.

    Each sample adds its trilinear share of ``values`` to ``target.data`` and
    the same share of its weight (1 by default, ``[value > 0]`` with
    ``indicator=True``, or explicit ``weights``) to ``target.weight``.
    """
    c = _coords(coords)
    v = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    if len(v) != len(c):
        raise ValueError("coords and values differ in length")
    if weights is not None:
        w = np.ascontiguousarray(weights, dtype=np.float64).reshape(-1)
    elif indicator:
        w = (v > 0).astype(np.float64)
    else:
        w = np.ones(len(v))
    k = _backend.get(backend) if backend else _backend.kernels
    dropped = k.push(target.data, target.weight if accumulate_weight else None, c, v, w)
    return PushStats(len(c), int(dropped))


def normalize(acc: Volume, eps=COVERAGE_EPS) -> Volume:
    """Divide accumulated data by accumulated weight; uncovered voxels -> 0."""
    covered = acc.weight > eps
    data = np.zeros_like(acc.data)
    np.divide(acc.data, acc.weight, out=data, where=covered)
    return Volume(data, acc.spacing, acc.origin, np.where(covered, acc.weight, 0.0))


@dataclass(frozen=True, eq=False)
class PsfKernel:
    """Discrete PSF: tap ``offsets`` (voxels, slice axes u, v, w) and ``weights``."""

    kind: str
    offsets: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(off) != len(w) or len(w) == 0:
            raise ValueError("offsets and weights must be non-empty and aligned")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("PSF taps must be nonnegative and sum to 1")
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "weights", w)

    @property
    def support(self):
        return np.abs(self.offsets).max(axis=0)

    @property
    def ntaps(self):
        return len(self.weights)

    def world_offsets(self, rotation):
        """Tap offsets rotated from slice axes into volume axes."""
        return self.offsets @ np.asarray(rotation).T


def thin_psf() -> PsfKernel:
    return PsfKernel("thin", np.zeros((1, 3)), np.ones(1))


def _gauss_taps(sigma):
    half = int(math.floor(GAUSS_TRUNCATE * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    return x, np.exp(-0.5 * (x / sigma) ** 2)


def make_gaussian_psf(slice_thickness, in_plane_spacing, voxel_spacing) -> PsfKernel:
    """Separable Gaussian; FWHM = thickness through-plane, pixel spacing in-plane."""
    if min(slice_thickness, in_plane_spacing, voxel_spacing) <= 0:
        raise ValueError("spacings must be positive")
    sig_in = in_plane_spacing / voxel_spacing / FWHM_PER_SIGMA
    sig_thru = slice_thickness / voxel_spacing / FWHM_PER_SIGMA
    xu, wu = _gauss_taps(sig_in)
    xw, ww = _gauss_taps(sig_thru)
    gu, gv, gw = np.meshgrid(xu, xu, xw, indexing="ij")
    w = (wu[:, None, None] * wu[None, :, None] * ww[None, None, :]).ravel()
    offs = np.stack([gu.ravel(), gv.ravel(), gw.ravel()], axis=1)
    return PsfKernel("gaussian", offs, w / w.sum())


def boxcar_profile(slice_thickness, voxel_spacing):
    """Overlap of each voxel ``[j-½, j+½]`` with the slab ``[-h, h]``."""
    if slice_thickness <= 0 or voxel_spacing <= 0:
        raise ValueError("spacings must be positive")
    half = 0.5 * slice_thickness / voxel_spacing
    n = int(math.ceil(half - 0.5 - 1e-12))
    j = np.arange(-n, n + 1, dtype=np.float64)
    overlap = np.clip(np.minimum(j + 0.5, half) - np.maximum(j - 0.5, -half), 0.0, None)
    keep = overlap > 0
    return j[keep], overlap[keep]


def make_boxcar_psf(slice_thickness, voxel_spacing) -> PsfKernel:
    j, overlap = boxcar_profile(slice_thickness, voxel_spacing)
    offs = np.zeros((len(j), 3))
    offs[:, 2] = j
    return PsfKernel("boxcar", offs, overlap / overlap.sum())


def make_psf(kind, slice_thickness=1.0, in_plane_spacing=1.0, voxel_spacing=1.0) -> PsfKernel:
    if kind == "thin":
        return thin_psf()
    if kind == "boxcar":
        return make_boxcar_psf(slice_thickness, voxel_spacing)
    if kind == "gaussian":
        return make_gaussian_psf(slice_thickness, in_plane_spacing, voxel_spacing)
    raise ValueError(f"unknown PSF kind {kind!r}")

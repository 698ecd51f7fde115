"""Rigid transforms, slice-pose fields and their rigid projection.

Conventions used throughout the package:

* volumes are indexed ``data[x, y, z]`` and coordinates are in voxel units;
* slice pixels ``p = (px, py)`` are placed on the ``z = 0`` plane of the
  slice frame, and a pose maps that frame into volume voxel coordinates;
* a :class:`DisplacementField` stores ``f(p)`` such that ``p↑ + f(p)`` is
  the voxel coordinate of pixel ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


class DegenerateGeometryError(ValueError):
    """Point configuration does not determine a rigid transform."""


def _check_rotation(r):
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
        raise ValueError("rotation determinant is not +1")


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x -> rotation @ x + translation`` (homogeneous 4x4 semantics)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(r)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4) or np.abs(m[3] - [0, 0, 0, 1]).max() > ORTHO_TOL:
            raise ValueError("expected a rigid 4x4 homogeneous matrix")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t):
        return cls(np.eye(3), t)

    @classmethod
    def from_params(cls, rotvec_deg, translation=(0.0, 0.0, 0.0)):
        rot = Rotation.from_rotvec(np.asarray(rotvec_deg, dtype=np.float64), degrees=True)
        return cls(_orthonormalize(rot.as_matrix()), translation)

    @classmethod
    def from_list(cls, values):
        """Inverse of :meth:`to_list` (row-major rotation, then translation)."""
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (12,):
            raise ValueError("a rigid transform serializes to exactly 12 numbers")
        return cls(v[:9].reshape(3, 3), v[9:])

    def to_list(self):
        return [float(x) for x in np.concatenate([self.rotation.ravel(), self.translation])]

    def rotvec_deg(self):
        return Rotation.from_matrix(self.rotation).as_rotvec(degrees=True)

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        rv = np.round(self.rotvec_deg(), 4)
        return f"RigidTransform(rotvec_deg={rv.tolist()}, translation={np.round(self.translation, 4).tolist()})"


def _orthonormalize(r):
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-12:
        r = _orthonormalize(r)
    return RigidTransform(r, a.rotation @ b.translation + a.translation)


def rotation_about(rotation, center) -> RigidTransform:
    """Rotation by ``rotation`` that keeps ``center`` fixed."""
    c = np.asarray(center, dtype=np.float64)
    r = np.asarray(rotation, dtype=np.float64)
    return RigidTransform(r, c - r @ c)


# exact 0/±1 matrices so that orthogonal stacks land on the voxel lattice
ORIENTATIONS = {
    "axial": np.eye(3),
    "coronal": np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
    "sagittal": np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]]),
}


def orientation(label: str) -> RigidTransform:
    try:
        return RigidTransform(ORIENTATIONS[label])
    except KeyError:
        raise ValueError(f"unknown stack orientation {label!r}") from None


@dataclass(frozen=True)
class PixelGrid:
    width: int
    height: int
    spacing: float = 1.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid width and height must be >= 1")
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")

    @property
    def shape(self):
        return (self.width, self.height)

    @property
    def center(self):
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])

    def pixels(self):
        """All pixel coordinates as an ``(W*H, 2)`` array, ``px`` major."""
        ij = np.indices(self.shape, dtype=np.float64)
        return ij.reshape(2, -1).T

    def points(self):
        return uplift(self.pixels())


def uplift(p):
    """Append a zero z-coordinate: ``(px, py) -> (px, py, 0)``."""
    p = np.asarray(p, dtype=np.float64)
    return np.concatenate([p, np.zeros(p.shape[:-1] + (1,))], axis=-1)


def drop_z(x):
    return np.asarray(x)[..., :2]


@dataclass(eq=False)
class DisplacementField:
    """Per-pixel 3D displacement, ``data[px, py] = f(p)`` in level voxel units."""

    data: np.ndarray
    level: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("field data must have shape (width, height, 3)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("displacement field contains non-finite values")

    @property
    def width(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @classmethod
    def zeros(cls, grid: PixelGrid, level=0):
        return cls(np.zeros(grid.shape + (3,)), level)

    def targets(self, grid: PixelGrid | None = None):
        """Voxel coordinates ``p↑ + f(p)`` as an ``(W*H, 3)`` array."""
        grid = grid or PixelGrid(self.width, self.height)
        if grid.shape != (self.width, self.height):
            raise ValueError("grid does not match field dimensions")
        return grid.points() + self.data.reshape(-1, 3)

    def copy(self):
        return DisplacementField(self.data.copy(), self.level)


def field_from_transform(transform: RigidTransform, grid: PixelGrid, level=0) -> DisplacementField:
    """Field of a rigid slice pose: ``f(p) = F(p↑) - p↑``."""
    pts = grid.points()
    disp = transform.apply(pts) - pts
    return DisplacementField(disp.reshape(grid.shape + (3,)), level)


def level_factor(level: int, n_levels: int) -> int:
    """Downsampling factor of pyramid ``level`` (0 is coarsest)."""
    if not 0 <= level < n_levels:
        raise ValueError(f"level {level} outside pyramid of {n_levels} levels")
    return 2 ** (n_levels - 1 - level)


def level_grid(grid: PixelGrid, factor: int) -> PixelGrid:
    """Grid obtained by keeping every ``factor``-th pixel of ``grid``."""
    return PixelGrid((grid.width - 1) // factor + 1, (grid.height - 1) // factor + 1,
                     grid.spacing * factor)


def prescribed_pose_matrix(translation: RigidTransform, orientation: RigidTransform,
                           grid: PixelGrid, *, scale=1.0, center=None):
    """Homogeneous ``C R C⁻¹ S⁻¹ T`` for one slice.

    ``center`` defaults to the pixel-grid center on the slice plane; a third
    component may be supplied to rotate about a point off the plane (the
    pipeline uses the volume center so that orthogonal stacks overlap).
    """
    if not scale > 0:
        raise ValueError("pose scale must be positive")
    if center is None:
        c = np.append(grid.center, 0.0)
    else:
        c = np.asarray(center, dtype=np.float64)
        if c.shape == (2,):
            c = np.append(c, 0.0)
    cm = np.eye(4)
    cm[:3, 3] = c
    cinv = np.eye(4)
    cinv[:3, 3] = -c
    sinv = np.diag([1.0 / scale] * 3 + [1.0])
    return cm @ orientation.matrix @ cinv @ sinv @ translation.matrix


def prescribed_pose_field(translation: RigidTransform, orientation: RigidTransform,
                          grid: PixelGrid, level: int = 0, *, scale=1.0,
                          center=None) -> DisplacementField:
    m = prescribed_pose_matrix(translation, orientation, grid, scale=scale, center=center)
    pts = grid.points()
    disp = pts @ m[:3, :3].T + m[:3, 3] - pts
    return DisplacementField(disp.reshape(grid.shape + (3,)), level)


def arun_fit(src, dst, weights=None):
    """Least-squares rigid ``(R, t)`` with ``R @ src + t ≈ dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("expected matching (N, 3) point sets")
    if len(src) < 3:
        raise DegenerateGeometryError("need at least 3 points")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    a = src - cs
    b = dst - cd
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometryError("source points are collinear or coincident")
    h = (a * w[:, None]).T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cd - r @ cs


def project_to_rigid(field: DisplacementField, grid: PixelGrid | None = None,
                     mask=None, weights=None) -> RigidTransform:
    """Closest rigid pose to a displacement field (SVD point-set fit).

    ``weights`` (one per pixel, nonnegative) turns it into a weighted fit.
    """
    grid = grid or PixelGrid(field.width, field.height)
    src = grid.points()
    dst = field.targets(grid)
    w = None if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        src, dst = src[keep], dst[keep]
        w = None if w is None else w[keep]
    if w is not None:
        keep = w > 0
        if not np.any(keep):
            raise DegenerateGeometryError("all weights are zero")
        src, dst, w = src[keep], dst[keep], w[keep]
    r, t = arun_fit(src, dst, w)
    return RigidTransform(_orthonormalize(r), t)


def rigid_residual(field: DisplacementField, transform: RigidTransform, grid=None):
    """Per-pixel distance between a field's targets and a rigid pose."""
    grid = grid or PixelGrid(field.width, field.height)
    return np.linalg.norm(field.targets(grid) - transform.apply(grid.points()), axis=1)


def upsample_field(field: DisplacementField, fine: PixelGrid, factor: int = 2) -> DisplacementField:
    """Bilinear upsampling with displacements scaled by ``factor``.

    Fine pixel ``q`` reads the coarse field at ``q / factor``; beyond the last
    coarse sample the edge cell is extrapolated linearly so that affine fields
    are reproduced exactly.
    """
    coarse = field.data
    out = coarse
    for axis, n_fine in ((0, fine.width), (1, fine.height)):
        n = out.shape[axis]
        u = np.arange(n_fine, dtype=np.float64) / factor
        if n == 1:
            out = np.repeat(out, n_fine, axis=axis)
            continue
        i0 = np.clip(np.floor(u).astype(int), 0, n - 2)
        t = u - i0
        a = np.take(out, i0, axis=axis)
        b = np.take(out, i0 + 1, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = n_fine
        t = t.reshape(shape)
        out = a * (1.0 - t) + b * t
    return DisplacementField(out * factor, field.level + 1)


def interpolate_rigid_trajectory(keyframes, query_times):
    """Cubic B-spline interpolation of rigid keyframes.

    Each keyframe is ``(time, RigidTransform)``; the spline runs over the
    6-vector (rotation vector in degrees, translation). Knots follow the
    not-a-knot construction, whose knot vector is clamped at both ends, so
    the first and last keyframes are reached exactly. Fewer than four
    keyframes lower the spline degree accordingly.
    """
    if len(keyframes) < 1:
        raise ValueError("need at least one keyframe")
    times = np.array([k[0] for k in keyframes], dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ValueError("keyframe times must be strictly increasing")
    params = np.array([np.concatenate([k[1].rotvec_deg(), k[1].translation]) for k in keyframes])
    q = np.asarray(query_times, dtype=np.float64)
    if len(keyframes) == 1:
        return [keyframes[0][1]] * len(q)
    spline = make_interp_spline(times, params, k=min(3, len(keyframes) - 1))
    vals = spline(q)
    return [RigidTransform.from_params(v[:3], v[3:]) for v in vals]

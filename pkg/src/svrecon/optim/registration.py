"""Slice-to-volume rigid registration by damped Gauss-Newton."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from ..forward_model import Slice, psf_coords
from ..geometry import RigidTransform, compose
from ..sampling import PsfKernel, Volume, pull, thin_psf
from .config import ReconConfig

MAX_HALVINGS = 12


@dataclass
class PoseResult:
    pose: RigidTransform
    objective_initial: float
    objective: float
    iterations: int
    status: str  # converged | max_iters | stalled | skipped
    step_deg: float = 0.0  # total rotation change
    step_mm: float = 0.0  # total translation change


class _SliceObjective:
    """``θ -> obs - scale·sim(F(θ))`` over the foreground of one or more slices.

    ``θ = (rotation vector in degrees, translation in voxels)`` is a rigid
    motion about the centroid of the placed foreground pixels, applied on
    top of every starting pose, so a group of slices moves as one body.
    """

    def __init__(self, sl, volume_data, pose0, psf: PsfKernel, scale=1.0, voxel_spacing=None):
        group = isinstance(sl, (list, tuple))
        slices = list(sl) if group else [sl]
        poses = list(pose0) if group else [pose0]
        scales = np.broadcast_to(np.asarray(scale, dtype=np.float64), (len(slices),))
        obs, x0, sc, placed = [], [], [], []
        for s, p, c in zip(slices, poses, scales):
            m = s.mask.reshape(-1)
            obs.append(s.data.reshape(-1)[m])
            x0.append(psf_coords(p, s.grid, psf, voxel_spacing)[m])  # (P, K, 3)
            sc.append(np.full(int(m.sum()), c))
            pix = s.grid.points()[m]
            if voxel_spacing is not None and s.grid.spacing != voxel_spacing:
                pix = pix * (s.grid.spacing / voxel_spacing)
            placed.append(p.apply(pix))
        self.obs = np.concatenate(obs)
        self.x0 = np.concatenate(x0)
        placed = np.concatenate(placed)
        self.w = psf.weights
        self.center = placed.mean(axis=0) if len(placed) else np.zeros(3)
        self.rel = (self.x0 - self.center).reshape(-1, 3)
        self.volume = volume_data
        self.scale = np.concatenate(sc)
        self.pose0 = pose0

    @staticmethod
    def _rot(theta):
        return Rotation.from_rotvec(theta[:3], degrees=True).as_matrix()

    def coords(self, theta):
        r = self._rot(theta)
        return self.rel @ r.T + (self.center + theta[3:])

    def residuals(self, thetas):
        """Residual vectors for a batch of parameter vectors, one pull call."""
        thetas = np.atleast_2d(thetas)
        x = np.concatenate([self.coords(t) for t in thetas])
        vals = pull(self.volume, x).reshape(len(thetas), -1, len(self.w)) @ self.w
        return self.obs[None, :] - self.scale * vals

    def objective(self, theta):
        r = self.residuals(theta)[0]
        return float(r @ r)

    def jacobian(self, theta, h, order=2):
        """Finite-difference Jacobian of the residual, central stencil."""
        eye = np.eye(6) * h[None, :]
        if order == 2:
            probes = np.concatenate([theta + eye, theta - eye])
            r = self.residuals(probes)
            jac = (r[:6] - r[6:]) / (2 * h[:, None])
        elif order == 4:
            probes = np.concatenate([theta + 2 * eye, theta + eye, theta - eye, theta - 2 * eye])
            r = self.residuals(probes)
            jac = (-r[:6] + 8 * r[6:12] - 8 * r[12:18] + r[18:]) / (12 * h[:, None])
        else:
            raise ValueError("order must be 2 or 4")
        return jac.T

    def pose(self, theta):
        r = self._rot(theta)
        local = RigidTransform(r, self.center + theta[3:] - r @ self.center)
        if isinstance(self.pose0, (list, tuple)):
            return [compose(local, p) for p in self.pose0]
        return compose(local, self.pose0)


def _steps(config, spacing):
    return np.array([config.fd_rot_step] * 3 + [config.fd_trans_step] * 3)


def pose_jacobian(sl: Slice, volume: Volume, pose: RigidTransform, psf=None, *, order=2,
                  config: ReconConfig | None = None, scale=1.0):
    """Residual Jacobian w.r.t. (rotation deg, translation voxels) at ``pose``."""
    config = config or ReconConfig()
    obj = _SliceObjective(sl, volume.data, pose, psf or thin_psf(), scale, volume.spacing[0])
    return obj.jacobian(np.zeros(6), _steps(config, volume.spacing[0]), order)


def register_slice(sl: Slice, volume_data, pose0: RigidTransform, psf: PsfKernel, *, scale=1.0,
                   config: ReconConfig | None = None, spacing=1.0, voxel_spacing=None,
                   translation_only=False) -> PoseResult:
    """Gauss-Newton fit of one rigid update to ``pose0``.

    ``sl``/``pose0``/``scale`` may also be sequences, in which case the
    slices share the update and ``PoseResult.pose`` is a list of poses.
    """
    config = config or ReconConfig()
    active = np.arange(3, 6) if translation_only else np.arange(6)
    group = sl if isinstance(sl, (list, tuple)) else [sl]
    if not any(s.mask.any() for s in group):
        return PoseResult(pose0, 0.0, 0.0, 0, "skipped")
    obj = _SliceObjective(sl, volume_data, pose0, psf, scale, voxel_spacing)
    theta, f0, f, it, status = _gauss_newton(obj, config, _steps(config, spacing), active, spacing)
    return PoseResult(obj.pose(theta), f0, f, it, status,
                      float(np.linalg.norm(theta[:3])), float(np.linalg.norm(theta[3:]) * spacing))


def _gauss_newton(obj, config, h, active, spacing=1.0):
    """Damped Gauss-Newton with a trust region and step halving; never increases ``f``."""
    theta = np.zeros(6)
    r = obj.residuals(theta)[0]
    f0 = f = float(r @ r)
    status = "max_iters"
    it = 0
    for it in range(1, config.pose_max_iters + 1):
        jac = obj.jacobian(theta, h)[:, active]
        hess = jac.T @ jac
        grad = jac.T @ r
        damp = 1e-6 * np.trace(hess) / len(active) + 1e-12
        delta = np.zeros(6)
        try:
            delta[active] = -np.linalg.solve(hess + damp * np.eye(len(active)), grad)
        except np.linalg.LinAlgError:
            status = "stalled"
            break
        # trust region: cap the rotation / translation length of a single step
        lim = max(np.linalg.norm(delta[:3]) / config.max_step_deg,
                  np.linalg.norm(delta[3:]) / config.max_step_vox, 1.0)
        delta = delta / lim
        alpha = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS):
            cand = theta + alpha * delta
            rc = obj.residuals(cand)[0]
            fc = float(rc @ rc)
            if fc < f:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            status = "stalled" if np.abs(delta).max() > 0 else "converged"
            break
        step = alpha * delta
        theta, r, f = cand, rc, fc
        if max(np.abs(step[:3]).max(), np.abs(step[3:]).max() * spacing) < config.pose_step_tol:
            status = "converged"
            break
    return theta, f0, f, it, status


class _VolumeObjective(_SliceObjective):
    """``θ -> moving(x) - fixed(T(θ) x)`` over the moving volume's support."""

    def __init__(self, moving: Volume, fixed_data, mask):
        pts = np.argwhere(mask).astype(np.float64)
        self.obs = moving.data[mask]
        self.w = np.ones(1)
        self.center = pts.mean(axis=0)
        self.rel = pts - self.center
        self.volume = fixed_data
        self.scale = 1.0
        self.pose0 = RigidTransform.identity()


def register_volumes(moving: Volume, fixed: Volume, *, sigmas=(2.0, 1.0), mask=None,
                     config: ReconConfig | None = None) -> RigidTransform:
    """Rigid ``T`` with ``moving(x) ≈ fixed(T x)`` in voxel coordinates.

    Coarse-to-fine over Gaussian blurs ``sigmas`` then the raw volumes.
    Used to express a reconstruction in a reference frame before scoring.
    """
    from scipy import ndimage

    config = config or ReconConfig(pose_max_iters=50)
    mask = moving.covered & (moving.data > 0) if mask is None else np.asarray(mask, dtype=bool)
    if mask.sum() < 4:
        return RigidTransform.identity()
    total = RigidTransform.identity()
    for sigma in tuple(x for x in sigmas if x > 0) + (0.0,):
        mv = ndimage.gaussian_filter(moving.data, sigma) if sigma else moving.data
        fx = ndimage.gaussian_filter(fixed.data, sigma) if sigma else fixed.data
        # moving voxel x maps to total(x); refine in the frame already reached
        cur = moving.with_data(mv)
        obj = _VolumeObjective(cur, fx, mask)
        obj.rel = total.apply(obj.rel + obj.center) - total.apply(obj.center)
        obj.center = total.apply(obj.center)
        theta, *_ = _gauss_newton(obj, config, _steps(config, 1.0), np.arange(6))
        r = obj._rot(theta)
        local = RigidTransform(r, obj.center + theta[3:] - r @ obj.center)
        total = compose(local, total)
    return total


def pose_update(sl: Slice, volume: Volume, pose0: RigidTransform, psf: PsfKernel | None = None, *,
                scale=1.0, config: ReconConfig | None = None, return_result=False):
    """Register one slice to a fixed volume; objective never increases."""
    res = register_slice(sl, volume.data, pose0, psf or thin_psf(), scale=scale, config=config,
                         spacing=float(volume.spacing[0]), voxel_spacing=float(volume.spacing[0]))
    return res if return_result else res.pose

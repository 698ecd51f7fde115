"""Matrix-free slice acquisition operator over many slices and its CGLS solve."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..forward_model import psf_coords
from ..sampling import PsfKernel, Volume, pull, push


class DivergenceError(RuntimeError):
    pass


def _as_list(x, n):
    return list(x) if isinstance(x, (list, tuple)) else [x] * n


class SliceSystem:
    """``A``: volume -> foreground pixels of all slices, scaled per slice.

    Rows are the masked pixels of each slice in order; each row is the
    PSF-weighted trilinear sample at the slice pose, times the slice scale.
    """

    def __init__(self, slices, poses, psf, dims, scales=None, voxel_spacing=None):
        n = len(slices)
        psfs = _as_list(psf, n)
        self.dims = tuple(dims)
        self.scales = np.ones(n) if scales is None else np.asarray(scales, dtype=np.float64)
        coords, segs, taps, obs = [], [], [], []
        start = 0
        for sl, pose, k in zip(slices, poses, psfs):
            m = sl.mask.reshape(-1)
            x = psf_coords(pose, sl.grid, k, voxel_spacing)[m]
            coords.append(x.reshape(-1, 3))
            obs.append(sl.data.reshape(-1)[m])
            segs.append((start, start + int(m.sum())))
            taps.append(k)
            start += int(m.sum())
        self.coords = np.concatenate(coords) if coords else np.zeros((0, 3))
        self.segments = segs
        self.psfs = taps
        self.observed = obs
        self.b = np.concatenate(obs) if obs else np.zeros(0)
        self.n_rows = start
        self._tap_start = np.cumsum([0] + [(e - s) * k.ntaps for (s, e), k in zip(segs, taps)])

    def simulate_raw(self, volume_data):
        """Per-slice unscaled predictions (list of arrays over masked pixels)."""
        vals = pull(volume_data, self.coords)
        out = []
        for i, k in enumerate(self.psfs):
            v = vals[self._tap_start[i]:self._tap_start[i + 1]]
            out.append(v.reshape(-1, k.ntaps) @ k.weights)
        return out

    def row_scales(self):
        return np.concatenate([np.full(e - s, c) for (s, e), c in zip(self.segments, self.scales)]) \
            if self.segments else np.zeros(0)

    def apply(self, volume_data):
        raw = self.simulate_raw(volume_data)
        return np.concatenate(raw) * self.row_scales() if raw else np.zeros(0)

    def adjoint(self, r):
        r = np.asarray(r, dtype=np.float64) * self.row_scales()
        vals = []
        for i, k in enumerate(self.psfs):
            s, e = self.segments[i]
            vals.append((r[s:e, None] * k.weights[None, :]).reshape(-1))
        acc = Volume.empty(self.dims)
        if vals:
            push(acc, self.coords, np.concatenate(vals), accumulate_weight=False)
        return acc.data

    def fit_scales(self, volume_data):
        """Closed-form nonnegative least-squares scale per slice."""
        raw = self.simulate_raw(volume_data)
        scales = np.empty(len(raw))
        for i, (sim, ob) in enumerate(zip(raw, self.observed)):
            den = float(sim @ sim)
            scales[i] = max(float(sim @ ob) / den, 0.0) if den > 0 else 1.0
        self.scales = scales
        return scales

    def residual_norm2(self, volume_data):
        r = self.b - self.apply(volume_data)
        return float(r @ r)

    def per_slice_residual(self, volume_data):
        raw = self.simulate_raw(volume_data)
        return np.array([float(np.sum((ob - c * sim) ** 2))
                         for sim, ob, c in zip(raw, self.observed, self.scales)])


@dataclass
class CGInfo:
    data_consistency: list = field(default_factory=list)  # ||b - A v||^2 per iterate
    normal_residual: list = field(default_factory=list)  # ||A^T (b - A v)|| per iterate
    iterations: int = 0
    status: str = "converged"


def cgls(system: SliceSystem, v0: np.ndarray, iters: int, tol: float = 1e-6):
    """Conjugate gradients on ``AᵀA v = Aᵀb`` starting from ``v0``.

    ``‖b − A v‖`` never increases between iterates. Stops on
    ``‖Aᵀr‖ ≤ tol·‖Aᵀr₀‖`` or after ``iters`` steps (status ``truncated``).
    """
    x = np.array(v0, dtype=np.float64, copy=True)
    r = system.b - system.apply(x)
    s = system.adjoint(r)
    info = CGInfo()
    gamma = float(np.vdot(s, s))
    info.data_consistency.append(float(r @ r))
    info.normal_residual.append(np.sqrt(gamma))
    if gamma == 0.0:
        return x, info
    stop = tol * np.sqrt(gamma)
    p = s.copy()
    for it in range(iters):
        q = system.apply(p)
        qq = float(q @ q)
        if qq == 0.0:
            break
        alpha = gamma / qq
        x += alpha * p
        r -= alpha * q
        s = system.adjoint(r)
        gamma_new = float(np.vdot(s, s))
        rr = float(r @ r)
        if not (np.isfinite(rr) and np.isfinite(gamma_new)):
            raise DivergenceError("non-finite residual in conjugate gradients")
        info.data_consistency.append(rr)
        info.normal_residual.append(np.sqrt(gamma_new))
        info.iterations = it + 1
        if np.sqrt(gamma_new) <= stop:
            return x, info
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    info.status = "truncated" if info.iterations >= iters else "converged"
    return x, info


def volume_update(slices, poses, psf: PsfKernel, v0: Volume, iters: int, *, scales=None,
                  tol=1e-6, return_info=False):
    """Least-squares volume for fixed poses: CG on the normal equations."""
    system = SliceSystem(slices, poses, psf, v0.dims, scales, v0.spacing[0])
    data, info = cgls(system, v0.data, iters, tol)
    out = Volume(data, v0.spacing, v0.origin, v0.weight.copy())
    return (out, info) if return_info else out

"""Brute-force and dense-system checks of the fast operators.

Each case builds a small problem, evaluates it with the library and with a
direct formula, and reports the worst discrepancy next to its tolerance.
``svrecon oracle --case <name>`` runs them from the command line.
"""

from __future__ import annotations

import time

import numpy as np

from .forward_model import Slice, assemble_dense_system, simulate_slice_psf
from .geometry import (PixelGrid, RigidTransform, field_from_transform, level_factor, level_grid,
                       prescribed_pose_field, project_to_rigid)
from .init_recon import init_volume
from .metrics import PSNR_CAP, SSIM_K1, SSIM_K2, SSIM_RADIUS, SSIM_SIGMA, ncc, psnr, ssim, tre
from .motion_sim import extract_stacks, make_rng, prescribed_fields
from .optim.refine import multilayer_residual_loss
from .optim.system import SliceSystem, cgls
from .phantoms import make_phantom
from .sampling import Volume, pull, push, thin_psf


def _random_pose(rng, center, rot_deg=30.0, shift=0.5):
    rv = rng.normal(0.0, rot_deg / np.sqrt(3), 3)
    r = RigidTransform.from_params(rv).rotation
    c = np.asarray(center, dtype=np.float64)
    return RigidTransform(r, c - r @ c + rng.uniform(-shift, shift, 3))


# ------------------------------------------------------------------- cases

def adjoint(rng):
    """<push(I), V> against <I, pull(V)> on a 16³ volume."""
    dims = (16, 16, 16)
    v = rng.standard_normal(dims)
    coords = rng.uniform(-1.0, 16.0, (1000, 3))
    vals = rng.standard_normal(1000)
    acc = Volume.empty(dims)
    push(acc, coords, vals, accumulate_weight=False)
    lhs = float(np.vdot(acc.data, v))
    rhs = float(vals @ pull(v, coords))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300), 1e-6


def _dense_problem(rng):
    dims = (4, 4, 4)
    grid = PixelGrid(4, 4)
    center = np.full(3, 1.5)
    poses = []
    for k in range(12):
        base = RigidTransform.from_translation((0.0, 0.0, k % 4))
        tilt = _random_pose(rng, center, rot_deg=10.0, shift=0.2)
        poses.append(tilt @ base)
    return dims, grid, poses


def dense_simulate(rng):
    """Forward slicing against the explicit matrix, pixelwise."""
    dims, grid, poses = _dense_problem(rng)
    v = rng.standard_normal(dims)
    a, _ = assemble_dense_system(dims, poses, grid)
    dense = (a @ v.reshape(-1)).reshape(len(poses), -1)
    full = [Slice(grid, np.zeros(grid.shape)) for _ in poses]
    err = np.abs(SliceSystem(full, poses, thin_psf(), dims).apply(v) - dense.ravel()).max()
    # simulated slices zero the pixels that fall mostly outside the volume
    for p, row in zip(poses, dense):
        sim = simulate_slice_psf(Volume(v), p, grid)
        m = sim.mask.reshape(-1)
        err = max(err, np.abs(sim.data.reshape(-1)[m] - row[m]).max(initial=0.0))
    return float(err), 1e-6


def dense_cg(rng):
    """CG least squares against the pseudo-inverse solution."""
    dims, grid, poses = _dense_problem(rng)
    slices = [Slice(grid, rng.standard_normal(grid.shape), np.ones(grid.shape, bool)) for _ in poses]
    a, b = assemble_dense_system(dims, poses, grid, slices=slices)
    ref = np.linalg.pinv(a) @ b
    system = SliceSystem(slices, poses, thin_psf(), dims)
    x, _ = cgls(system, np.zeros(dims), 500, tol=1e-12)
    return float(np.abs(x.reshape(-1) - ref).max()), 1e-4


def pose_field(rng):
    """Prescribed pose field against direct homogeneous-matrix evaluation."""
    worst = 0.0
    for _ in range(100):
        n_levels = int(rng.integers(1, 6))
        level = int(rng.integers(0, n_levels))
        k = level_factor(level, n_levels)
        grid = level_grid(PixelGrid(int(rng.integers(8, 40)), int(rng.integers(8, 40))), k)
        trans = RigidTransform.from_translation(rng.uniform(-5, 5, 3))
        orient = RigidTransform.from_params(rng.uniform(-180, 180, 3) / np.sqrt(3))
        scale = float(k)
        fld = prescribed_pose_field(trans, orient, grid, level, scale=scale)
        c = np.array([(grid.width - 1) / 2.0, (grid.height - 1) / 2.0, 0.0])
        r = orient.rotation
        for j in range(grid.height):
            for i in range(grid.width):
                p = np.array([i, j, 0.0])
                x = r @ ((p + trans.translation) / scale - c) + c
                worst = max(worst, float(np.abs(fld.data[i, j] - (x - p)).max()))
    return worst, 1e-9


def arun(rng):
    """Rigid fields projected back to their pose."""
    worst = 0.0
    for _ in range(50):
        grid = PixelGrid(int(rng.integers(4, 20)), int(rng.integers(4, 20)))
        pose = _random_pose(rng, (8.0, 8.0, 8.0), rot_deg=60.0, shift=5.0)
        back = project_to_rigid(field_from_transform(pose, grid), grid)
        worst = max(worst, float(np.abs(back.matrix - pose.matrix).max()))
    return worst, 1e-9


def arun_noisy(rng):
    """Noisy fields: recovered placement error stays below the noise RMS."""
    worst = 0.0
    for _ in range(50):
        grid = PixelGrid(16, 16)
        pose = _random_pose(rng, (8.0, 8.0, 8.0), rot_deg=60.0, shift=5.0)
        fld = field_from_transform(pose, grid)
        noise = rng.normal(0.0, 0.3, fld.data.shape)
        fld.data += noise
        back = project_to_rigid(fld, grid)
        err = np.linalg.norm(back.apply(grid.points()) - pose.apply(grid.points()), axis=1)
        rms_noise = float(np.sqrt(np.mean(np.sum(noise ** 2, axis=-1))))
        worst = max(worst, float(np.sqrt(np.mean(err ** 2))) / rms_noise)
    return worst, 1.0


def lossless(rng):
    """Thin orthogonal stacks at matched spacing re-splat to the phantom."""
    phantom = make_phantom("ellipsoids", 16, int(rng.integers(1 << 31)))
    stacks = extract_stacks(phantom, psf_kind="thin")
    vol = init_volume(stacks, prescribed_fields(stacks), phantom.dims, 1.0)
    cov = vol.covered
    return float(np.abs(vol.data[cov] - phantom.data[cov]).max()), 1e-6


# direct-formula metrics, written as loops over explicit windows

def _gauss_window():
    x = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    g /= g.sum()
    return g[:, None, None] * g[None, :, None] * g[None, None, :]


def _naive_ssim(a, b):
    w = _gauss_window()
    r = SSIM_RADIUS
    pa = np.pad(a, r, mode="symmetric")
    pb = np.pad(b, r, mode="symmetric")
    rng = a.max() - a.min()
    c1, c2 = (SSIM_K1 * rng) ** 2, (SSIM_K2 * rng) ** 2
    total = 0.0
    for i, j, k in np.ndindex(a.shape):
        wa = pa[i:i + 2 * r + 1, j:j + 2 * r + 1, k:k + 2 * r + 1]
        wb = pb[i:i + 2 * r + 1, j:j + 2 * r + 1, k:k + 2 * r + 1]
        ma, mb = np.sum(w * wa), np.sum(w * wb)
        va = np.sum(w * wa * wa) - ma * ma
        vb = np.sum(w * wb * wb) - mb * mb
        cov = np.sum(w * wa * wb) - ma * mb
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return total / a.size


def _naive_psnr(a, b):
    mse = np.mean((a - b) ** 2)
    return min(PSNR_CAP, 10 * np.log10((a.max() - a.min()) ** 2 / mse))


def _naive_ncc(a, b):
    x, y = a.ravel(), b.ravel()
    n = x.size
    mx, my = sum(x) / n, sum(y) / n
    num = sum((xi - mx) * (yi - my) for xi, yi in zip(x, y))
    den = np.sqrt(sum((xi - mx) ** 2 for xi in x) * sum((yi - my) ** 2 for yi in y))
    return num / den


def metrics(rng):
    """SSIM, PSNR, NCC and TRE against direct formulas on 8³ pairs."""
    worst = 0.0
    for _ in range(3):
        a = rng.uniform(0, 1, (8, 8, 8))
        b = a + rng.normal(0, 0.1, a.shape)
        worst = max(worst, abs(ssim(a, b) - _naive_ssim(a, b)),
                    abs(psnr(a, b) - _naive_psnr(a, b)),
                    abs(ncc(a, b) - _naive_ncc(a, b)))
        grid = PixelGrid(8, 8)
        e = field_from_transform(_random_pose(rng, (4, 4, 4)), grid)
        g = field_from_transform(_random_pose(rng, (4, 4, 4)), grid)
        direct = max(np.sqrt(np.sum((e.data[i, j] - g.data[i, j]) ** 2))
                     for i in range(8) for j in range(8))
        worst = max(worst, abs(tre(e, g) - direct))
    return float(worst), 1e-9


def _naive_uplift(coarse, width, height, k):
    """Bilinear read at ``q / k`` with linear extrapolation past the last sample."""
    n0, n1 = coarse.shape[:2]
    out = np.zeros((width, height, 3))
    for qi in range(width):
        for qj in range(height):
            u, v = qi / k, qj / k
            i0 = min(max(int(np.floor(u)), 0), max(n0 - 2, 0))
            j0 = min(max(int(np.floor(v)), 0), max(n1 - 2, 0))
            tu = u - i0 if n0 > 1 else 0.0
            tv = v - j0 if n1 > 1 else 0.0
            i1 = i0 + 1 if n0 > 1 else i0
            j1 = j0 + 1 if n1 > 1 else j0
            val = ((1 - tu) * (1 - tv) * coarse[i0, j0] + tu * (1 - tv) * coarse[i1, j0]
                   + (1 - tu) * tv * coarse[i0, j1] + tu * tv * coarse[i1, j1])
            out[qi, qj] = k * val
    return out


def level_loss(rng):
    """Multi-level field loss against explicit per-pixel summation."""
    from .geometry import DisplacementField

    n_levels, n_slices = 3, 3
    full = PixelGrid(9, 7)
    gts = [DisplacementField(rng.standard_normal(full.shape + (3,))) for _ in range(n_slices)]
    levels = []
    for s in range(n_levels):
        g = level_grid(full, level_factor(s, n_levels))
        levels.append([DisplacementField(rng.standard_normal(g.shape + (3,)), s) for _ in range(n_slices)])
    fast = multilayer_residual_loss(levels, gts)
    direct = 0.0
    for n in range(n_slices):
        mean = sum(_naive_uplift(levels[s][n].data, full.width, full.height, level_factor(s, n_levels))
                   for s in range(n_levels)) / n_levels
        direct += sum(float(np.sum((gts[n].data[i, j] - mean[i, j]) ** 2))
                      for i in range(full.width) for j in range(full.height))
    return abs(fast - direct) / max(abs(direct), 1.0), 1e-9


CASES = {
    "adjoint": adjoint,
    "dense_simulate": dense_simulate,
    "dense_cg": dense_cg,
    "pose_field": pose_field,
    "arun": arun,
    "arun_noisy": arun_noisy,
    "lossless": lossless,
    "metrics": metrics,
    "level_loss": level_loss,
}


def run_case(name, seed=0):
    """Run one case; returns ``{"case", "error", "tolerance", "passed", "seconds"}``."""
    if name not in CASES:
        raise KeyError(f"unknown oracle case {name!r}; expected one of {sorted(CASES)}")
    t0 = time.perf_counter()
    err, tol = CASES[name](make_rng(seed))
    return {"case": name, "error": float(err), "tolerance": tol, "passed": bool(err <= tol),
            "seconds": time.perf_counter() - t0}


__all__ = ["CASES", "run_case"]

"""Registration (TRE) and image similarity metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .forward_model import simulate_slice_psf
from .geometry import DisplacementField
from .sampling import Volume

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11-tap window
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0


def _spacing_vec(spacing):
    return np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))


def tre(est: DisplacementField, gt: DisplacementField, spacing=1.0, mask=None) -> float:
    """Largest per-pixel distance (mm) between estimated and true placements."""
    if est.data.shape != gt.data.shape:
        raise ValueError("fields are on different grids")
    d = np.linalg.norm((est.data - gt.data) * _spacing_vec(spacing), axis=-1)
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
    return float(d.max()) if d.size else 0.0


def median_max_tre(stacks_fields_est, stacks_fields_gt, spacing=1.0, masks=None):
    """Median over the slices of each stack of the per-slice max TRE.

    Returns ``(per_stack, mean_over_stacks)``.
    """
    per_stack = []
    for i, (est, gt) in enumerate(zip(stacks_fields_est, stacks_fields_gt)):
        if len(est) == 0 or len(est) != len(gt):
            raise ValueError(f"stack {i} is empty or mismatched")
        ms = masks[i] if masks is not None else [None] * len(est)
        per_stack.append(float(np.median([tre(e, g, spacing, m) for e, g, m in zip(est, gt, ms)])))
    return per_stack, float(np.mean(per_stack))


def _arrays(a, b, mask):
    if isinstance(a, Volume) and isinstance(b, Volume):
        if mask is None:
            mask = a.covered | b.covered
        a, b = a.data, b.data
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("inputs differ in shape")
    mask = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return a, b, mask


def _data_range(ref, mask):
    vals = ref[mask]
    return float(vals.max() - vals.min()) if vals.size else 0.0


def ssim_map(a, b, data_range):
    def filt(x):
        return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="reflect", radius=SSIM_RADIUS)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    ma, mb = filt(a), filt(b)
    va = filt(a * a) - ma * ma
    vb = filt(b * b) - mb * mb
    cov = filt(a * b) - ma * mb
    num = (2 * ma * mb + c1) * (2 * cov + c2)
    den = (ma * ma + mb * mb + c1) * (va + vb + c2)
    # c1, c2 underflow for tiny ranges; flat zero windows then score 1
    return np.divide(num, den, out=np.ones_like(num), where=den > 0)


def ssim(reference, test, mask=None, data_range=None) -> float:
    """Gaussian-window SSIM averaged over ``mask``; range taken from ``reference``."""
    a, b, mask = _arrays(reference, test, mask)
    if not mask.any():
        return 0.0
    rng = _data_range(a, mask) if data_range is None else data_range
    if rng == 0:
        return 1.0 if np.array_equal(a[mask], b[mask]) else 0.0
    return float(ssim_map(a, b, rng)[mask].mean())


def psnr(reference, test, cap=PSNR_CAP, mask=None, data_range=None) -> float:
    a, b, mask = _arrays(reference, test, mask)
    mse = float(np.mean((a[mask] - b[mask]) ** 2)) if mask.any() else 0.0
    rng = _data_range(a, mask) if data_range is None else data_range
    if mse == 0.0:
        return cap
    if rng == 0.0:
        return 0.0
    return float(min(cap, 10.0 * np.log10(rng * rng / mse)))


def ncc(a, b, mask=None, *, return_degenerate=False):
    """Zero-mean normalized cross-correlation over ``mask``.

    Constant inputs are degenerate: 1 when identical, otherwise 0.
    """
    a, b, mask = _arrays(a, b, mask)
    x = a[mask] - a[mask].mean() if mask.any() else np.zeros(0)
    y = b[mask] - b[mask].mean() if mask.any() else np.zeros(0)
    den = np.sqrt(float(x @ x) * float(y @ y))
    if den == 0.0:
        val = 1.0 if np.array_equal(a[mask], b[mask]) else 0.0
        return (val, True) if return_degenerate else val
    val = float(np.clip(x @ y / den, -1.0, 1.0))
    return (val, False) if return_degenerate else val


@dataclass
class MetricReport:
    tre_max: float | None = None
    tre_median_max_per_stack: list = field(default_factory=list)
    ssim: float | None = None
    ncc: float | None = None
    psnr: float | None = None
    per_slice_consistency: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def slice_consistency(stacks, result, psf=None) -> MetricReport:
    """Mean SSIM/NCC/PSNR between acquired slices and slices simulated from ``result``.

    ``psf`` may be a single kernel or one per slice; by default the boxcar
    kernel of each stack's thickness is used.
    """
    from .optim.svr import slice_psfs

    slices = [s for st in stacks for s in st.slices]
    if psf is None:
        psfs = slice_psfs(stacks, "boxcar", float(result.volume.spacing[0]))
    else:
        psfs = psf if isinstance(psf, (list, tuple)) else [psf] * len(slices)
    scales = result.slice_scales if len(result.slice_scales) == len(slices) else np.ones(len(slices))
    rows = []
    for i, (sl, pose, k) in enumerate(zip(slices, result.poses, psfs)):
        if not sl.mask.any():
            continue
        sim = simulate_slice_psf(result.volume, pose, sl.grid, k)
        pred = sim.data * scales[i]
        rows.append({
            "slice": i,
            "ssim": ssim(sl.data, pred, sl.mask),
            "ncc": ncc(sl.data, pred, sl.mask),
            "psnr": psnr(sl.data, pred, mask=sl.mask),
        })
    report = MetricReport(per_slice_consistency=rows)
    if rows:
        report.ssim = float(np.mean([r["ssim"] for r in rows]))
        report.ncc = float(np.mean([r["ncc"] for r in rows]))
        report.psnr = float(np.mean([r["psnr"] for r in rows]))
    return report

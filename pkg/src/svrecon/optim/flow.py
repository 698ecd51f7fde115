"""Deterministic displacement residual between a simulated and an observed slice.

In-plane: windowed Lucas-Kanade least squares with Tikhonov damping.
Through-plane: parabola through the local correlation of the observed slice
with simulated probes one voxel behind and ahead along the slice normal.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..forward_model import Slice
from ..geometry import DisplacementField


def _box(a, size):
    return ndimage.uniform_filter(a, size=size, mode="constant") * (size * size)


def _local_ncc(a, b, w, size):
    """Windowed zero-mean NCC of ``a`` and ``b`` over weights ``w``."""
    n = _box(w, size)
    safe = np.maximum(n, 1e-12)
    ma = _box(w * a, size) / safe
    mb = _box(w * b, size) / safe
    cov = _box(w * a * b, size) / safe - ma * mb
    va = _box(w * a * a, size) / safe - ma * ma
    vb = _box(w * b * b, size) / safe - mb * mb
    den = np.sqrt(np.maximum(va, 0) * np.maximum(vb, 0))
    return np.where(den > 1e-12, cov / np.maximum(den, 1e-12), 0.0)


def inplane_shift(simulated, observed, weight, window=5, damping=1e-3):
    """Per-pixel ``d`` with ``observed(p) ≈ simulated(p + d)``."""
    gx, gy = np.gradient(simulated)
    diff = (observed - simulated) * weight
    gx = gx * weight
    gy = gy * weight
    sxx = _box(gx * gx, window) + damping
    syy = _box(gy * gy, window) + damping
    sxy = _box(gx * gy, window)
    bx = _box(gx * diff, window)
    by = _box(gy * diff, window)
    det = sxx * syy - sxy * sxy
    dx = (syy * bx - sxy * by) / det
    dy = (sxx * by - sxy * bx) / det
    return dx, dy


def flow_confidence(simulated: Slice, observed: Slice, window=5):
    """Windowed gradient energy of the simulated slice over the common mask.

    Large where the in-plane solve is well posed; zero in flat regions.
    """
    w = (simulated.mask & observed.mask).astype(np.float64)
    gx, gy = np.gradient(simulated.data)
    return _box((gx * gx + gy * gy) * w, window)


def through_plane_shift(observed, probe_minus, center, probe_plus, weight, window=5):
    """Sub-voxel peak of the local correlation at offsets -1, 0, +1."""
    cm = _local_ncc(observed, probe_minus, weight, window)
    c0 = _local_ncc(observed, center, weight, window)
    cp = _local_ncc(observed, probe_plus, weight, window)
    curv = cm - 2 * c0 + cp
    safe = np.where(curv < -1e-9, curv, -1.0)
    peak = np.where(curv < -1e-9, 0.5 * (cm - cp) / safe, 0.0)
    # NCC cannot exceed 1: shrink the step when the parabola promises more
    # gain than is left, so a perfect match stays put
    gain = np.where(curv < -1e-9, -0.125 * (cm - cp) ** 2 / safe, 0.0)
    room = np.clip(1.0 - c0, 0.0, None)
    peak = peak * np.where(gain > room, room / np.maximum(gain, 1e-300), 1.0)
    # no interior maximum: step toward the better neighbour
    edge = (curv >= -1e-9) & (np.maximum(cm, cp) > c0)
    peak = np.where(edge, np.where(cp > cm, 1.0, -1.0), peak)
    return np.clip(peak, -1.0, 1.0)


def flow_residual(simulated: Slice, observed: Slice, max_disp: float, *, probes=None,
                  window=5, damping=1e-3) -> DisplacementField:
    """Residual displacement in slice axes ``(u, v, w)``.

    ``probes`` is an optional pair of slices simulated one voxel behind and
    ahead along the slice normal; without it the ``w`` component is zero.
    The vector at each pixel is clamped to norm ``max_disp`` and is zero
    wherever the window holds no pixel valid in both slices.
    """
    if simulated.grid.shape != observed.grid.shape:
        raise ValueError("simulated and observed slices must share a grid")
    weight = (simulated.mask & observed.mask).astype(np.float64)
    out = np.zeros(observed.grid.shape + (3,))
    support = _box(weight, window) > 0.5
    if not support.any():
        return DisplacementField(out)
    dx, dy = inplane_shift(simulated.data, observed.data, weight, window, damping)
    out[..., 0] = dx
    out[..., 1] = dy
    if probes is not None:
        minus, plus = probes
        w = weight * minus.mask * plus.mask
        out[..., 2] = through_plane_shift(observed.data, minus.data, simulated.data, plus.data,
                                          w, window)
    out[~support] = 0.0
    norm = np.linalg.norm(out, axis=-1, keepdims=True)
    out = np.where(norm > max_disp, out * (max_disp / np.maximum(norm, 1e-300)), out)
    return DisplacementField(out)

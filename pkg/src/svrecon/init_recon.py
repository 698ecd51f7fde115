"""Normalized splat initialization of a volume from posed slices."""

from __future__ import annotations

import numpy as np

from .geometry import DisplacementField, project_to_rigid
from .sampling import PsfKernel, Volume, normalize, push, thin_psf


class EmptyInputError(ValueError):
    """No foreground pixel is available to reconstruct from."""


def flatten_slices(stacks):
    return [s for stack in stacks for s in stack.slices]


def flatten_fields(stacks, fields):
    """Accept one list per stack or a flat per-slice list."""
    fields = list(fields)
    n = sum(len(st) for st in stacks)
    if fields and not isinstance(fields[0], DisplacementField):
        fields = [f for group in fields for f in group]
    if len(fields) != n:
        raise ValueError(f"expected {n} displacement fields, got {len(fields)}")
    return fields


def default_geometry(stacks):
    """Cubic grid at the finest in-plane spacing covering the largest slice."""
    spacing = min(st.in_plane_spacing for st in stacks)
    n = max(max(st.grid.width, st.grid.height) for st in stacks)
    return (n, n, n), spacing


def splat_coords(sl, field, psf):
    """Tap positions ``(n_pixels, n_taps, 3)`` for one slice under ``field``."""
    x = field.targets(sl.grid)
    if psf.ntaps == 1 and not psf.offsets.any():
        return x[:, None, :]
    rot = project_to_rigid(field, sl.grid).rotation
    return x[:, None, :] + psf.world_offsets(rot)[None, :, :]


def init_volume(stacks, fields, dims=None, spacing=None, *, psf: PsfKernel | None = None,
                indicator=False, origin=(0.0, 0.0, 0.0)) -> Volume:
    """Push every foreground pixel to ``p↑ + f(p)`` and normalize.

    With a multi-tap ``psf`` each pixel is spread over its taps, which gives
    the PSF-weighted initialization; the default thin PSF is the plain
    trilinear splat.
    """
    if dims is None or spacing is None:
        d, s = default_geometry(stacks)
        dims = dims or d
        spacing = spacing or s
    psf = psf or thin_psf()
    fields = flatten_fields(stacks, fields)
    acc = Volume.empty(dims, spacing, origin)
    coords, values, weights = [], [], []
    for sl, f in zip(flatten_slices(stacks), fields):
        fg = sl.mask.reshape(-1)
        if not fg.any():
            continue
        x = splat_coords(sl, f, psf)[fg]
        v = sl.data.reshape(-1)[fg]
        coords.append(x.reshape(-1, 3))
        values.append(np.repeat(v, psf.ntaps))
        w = np.tile(psf.weights, len(v))
        if indicator:
            w = w * np.repeat(v > 0, psf.ntaps)
        weights.append(w)
    if not coords:
        raise EmptyInputError("no foreground pixels in the input stacks")
    c = np.concatenate(coords)
    w = np.concatenate(weights)
    push(acc, c, np.concatenate(values) * w, weights=w)
    return normalize(acc)

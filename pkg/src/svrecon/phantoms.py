"""Procedural test volumes standing in for masked brain MRI."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .sampling import Volume

KINDS = ("ellipsoids", "checker", "shell")

# semi-axes of the outer/inner shell surfaces as fractions of the grid size
SHELL_OUTER = (0.40, 0.34, 0.30)
SHELL_INNER = (0.28, 0.22, 0.18)


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def _normalized_coords(dims):
    axes = [np.arange(n, dtype=np.float64) - (n - 1) / 2.0 for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(coords, center, axes):
    r = sum(((c - c0) / a) ** 2 for c, c0, a in zip(coords, center, axes))
    return r <= 1.0


def shell_semi_axes(dims):
    outer = [f * n for f, n in zip(SHELL_OUTER, dims)]
    inner = [f * n for f, n in zip(SHELL_INNER, dims)]
    return outer, inner


def make_phantom(kind="ellipsoids", dims=(32, 32, 32), seed=0, spacing=1.0) -> Volume:
    """Deterministic phantom with intensities in ``[0, 1]`` and zero background."""
    dims = tuple(int(d) for d in np.broadcast_to(dims, (3,)))
    if min(dims) < 8:
        raise ValueError("phantom dims must be at least 8 per axis")
    rng = _rng(seed)
    xyz = _normalized_coords(dims)
    n = np.asarray(dims, dtype=np.float64)

    if kind == "shell":
        outer, inner = shell_semi_axes(dims)
        fg = _ellipsoid(xyz, (0, 0, 0), outer) & ~_ellipsoid(xyz, (0, 0, 0), inner)
        data = np.where(fg, 0.8, 0.0)
    elif kind == "checker":
        head = _ellipsoid(xyz, (0, 0, 0), 0.42 * n)
        block = max(2, dims[0] // 6)
        idx = np.indices(dims) // block
        data = np.where((idx.sum(axis=0) % 2) == 0, 0.35, 0.8)
        data = ndimage.gaussian_filter(data, 0.8)
        data = np.where(head, data, 0.0)
    elif kind == "ellipsoids":
        axes = n * rng.uniform(0.36, 0.44, 3)
        head = _ellipsoid(xyz, (0, 0, 0), axes)
        data = np.where(head, 0.35, 0.0)
        rim = head & ~_ellipsoid(xyz, (0, 0, 0), axes * 0.85)
        data[rim] = 0.9
        for _ in range(int(rng.integers(6, 10))):
            c = rng.uniform(-0.45, 0.45, 3) * axes
            a = rng.uniform(0.12, 0.35, 3) * axes
            data[_ellipsoid(xyz, c, a) & head] = rng.uniform(0.15, 1.0)
        freq = rng.uniform(1.5, 3.5, 3) * 2 * np.pi / n
        phase = rng.uniform(0, 2 * np.pi, 3)
        texture = np.prod([np.sin(f * c + p) for f, c, p in zip(freq, xyz, phase)], axis=0)
        data = ndimage.gaussian_filter(data + 0.08 * texture, 0.7)
        data = np.where(head, data, 0.0)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {KINDS}")
    return Volume(np.clip(data, 0.0, 1.0), spacing)

"""Pure-numpy trilinear gather/scatter kernels (fallback for ``_ckernels``)."""

import numpy as np

_CORNERS = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]


def _corner_terms(shape, coords):
    coords = np.asarray(coords, dtype=np.float64)
    finite = np.isfinite(coords).all(axis=1)
    safe = np.where(finite[:, None], coords, -10.0)
    base = np.floor(safe).astype(np.int64)
    frac = safe - base
    dims = np.asarray(shape)
    for a, b, c in _CORNERS:
        off = np.array((a, b, c))
        idx = base + off
        ok = np.all((idx >= 0) & (idx < dims), axis=1)
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        flat = np.ravel_multi_index(tuple(np.where(ok[:, None], idx, 0).T), shape)
        yield flat, np.where(ok, w, 0.0)


def _bounds(shape, coords):
    coords = np.asarray(coords, dtype=np.float64)
    finite = np.isfinite(coords).all(axis=1)
    dims = np.asarray(shape)
    with np.errstate(invalid="ignore"):
        inside = np.all((coords >= 0.0) & (coords <= dims - 1), axis=1)
    return finite & inside


def pull(vol, coords):
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    flat_vol = vol.ravel()
    out = np.zeros(len(coords), dtype=np.float64)
    for flat, w in _corner_terms(vol.shape, coords):
        out += w * flat_vol[flat]
    return out, _bounds(vol.shape, coords)


def push(data, weight, coords, values, wvals):
    shape = data.shape
    n = data.size
    values = np.asarray(values, dtype=np.float64)
    wvals = np.asarray(wvals, dtype=np.float64)
    acc = np.zeros(n)
    wacc = np.zeros(n) if weight is not None else None
    for flat, w in _corner_terms(shape, coords):
        acc += np.bincount(flat, weights=w * values, minlength=n)
        if wacc is not None:
            wacc += np.bincount(flat, weights=w * wvals, minlength=n)
    data += acc.reshape(shape)
    if weight is not None:
        weight += wacc.reshape(shape)
    return int(np.count_nonzero(~_bounds(shape, coords)))

"""Raw + JSON file formats for volumes, stacks, fields and transforms.

Every object is a JSON header ``<stem>.json`` next to little-endian raw
payloads. Volume and slice samples are 32-bit floats stored x-fastest;
displacement fields use 64-bit floats so poses survive a round trip.
All writes go to a temporary file first and are renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import tempfile
from pathlib import Path

import numpy as np

from .forward_model import Slice, SliceStack
from .geometry import DisplacementField, PixelGrid, RigidTransform
from .sampling import Volume

FORMAT_VERSION = 1
VOLUME_DTYPE = "<f4"
FIELD_DTYPE = "<f8"


class FormatError(ValueError):
    """Base class; ``code`` is a stable machine-readable tag."""

    code = "format_error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        return {"error": self.code, "message": str(self), **self.details}


class MalformedHeaderError(FormatError):
    code = "malformed_header"


class TruncatedPayloadError(FormatError):
    code = "truncated_payload"


class DtypeMismatchError(FormatError):
    code = "dtype_mismatch"


class DimsMismatchError(FormatError):
    code = "dims_mismatch"


# ----------------------------------------------------------------- plumbing

def atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def atomic_write_json(path, obj):
    atomic_write_bytes(path, canonical_json(obj).encode())


def _stem(path):
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".raw") else path


def _read_header(path, kind):
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedHeaderError(f"{path.name}: not valid JSON ({exc})", field="header") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path.name}: header must be a JSON object", field="header")
    if header.get("format") != kind:
        raise MalformedHeaderError(f"{path.name}: expected format {kind!r}, got {header.get('format')!r}",
                                   field="format")
    return header


def _require(header, key, name):
    if key not in header:
        raise MalformedHeaderError(f"{name}: missing field {key!r}", field=key)
    return header[key]


def _positive_ints(values, key, name, n=None):
    try:
        out = [int(v) for v in values]
        ok = all(float(v) == int(v) for v in values)
    except (TypeError, ValueError):
        ok = False
    if not ok or (n is not None and len(out) != n) or any(v <= 0 for v in out):
        raise MalformedHeaderError(f"{name}: {key!r} must be {n or 'a list of'} positive integers",
                                   field=key)
    return out


def _check_dtype(header, expected, name):
    dtype = _require(header, "dtype", name)
    if dtype != expected:
        raise DtypeMismatchError(f"{name}: payload dtype {dtype!r}, expected {expected!r}",
                                 field="dtype", found=dtype, expected=expected)
    if header.get("endianness", "little") != "little":
        raise DtypeMismatchError(f"{name}: only little-endian payloads are supported",
                                 field="endianness")


def _read_payload(path, count, dtype, field, name):
    raw = Path(path).read_bytes()
    itemsize = np.dtype(dtype).itemsize
    need = count * itemsize
    if len(raw) < need:
        raise TruncatedPayloadError(f"{name}: payload has {len(raw)} bytes, header implies {need}",
                                    field=field, expected_bytes=need, found_bytes=len(raw))
    if len(raw) > need:
        raise DimsMismatchError(f"{name}: payload has {len(raw)} bytes but {field!r} implies {need}",
                                field=field, expected_bytes=need, found_bytes=len(raw))
    return np.frombuffer(raw, dtype=dtype)


# ------------------------------------------------------------------ volumes

def write_volume(path, volume: Volume, *, mask=True):
    """Write ``<stem>.json`` + ``<stem>.raw`` (+ ``<stem>.mask.raw``)."""
    stem = _stem(path)
    header = {
        "format": "svrecon-volume",
        "version": FORMAT_VERSION,
        "dims": list(volume.dims),
        "spacing": [float(s) for s in volume.spacing],
        "origin": [float(o) for o in volume.origin],
        "dtype": "float32",
        "endianness": "little",
        "order": "x-fastest",
        "mask": bool(mask),
    }
    atomic_write_bytes(f"{stem}.raw", volume.data.astype(VOLUME_DTYPE).tobytes(order="F"))
    if mask:
        atomic_write_bytes(f"{stem}.mask.raw", volume.covered.astype(np.uint8).tobytes(order="F"))
    atomic_write_json(f"{stem}.json", header)
    return Path(f"{stem}.json")


def read_volume(path) -> Volume:
    stem = _stem(path)
    name = Path(f"{stem}.json").name
    header = _read_header(f"{stem}.json", "svrecon-volume")
    dims = _positive_ints(_require(header, "dims", name), "dims", name, 3)
    _check_dtype(header, "float32", name)
    spacing = np.asarray(_require(header, "spacing", name), dtype=np.float64)
    origin = np.asarray(header.get("origin", [0.0, 0.0, 0.0]), dtype=np.float64)
    if spacing.shape != (3,) or np.any(spacing <= 0) or origin.shape != (3,):
        raise MalformedHeaderError(f"{name}: spacing/origin must be 3 numbers, spacing positive",
                                   field="spacing")
    count = int(np.prod(dims))
    flat = _read_payload(f"{stem}.raw", count, VOLUME_DTYPE, "dims", name)
    data = flat.reshape(dims, order="F").astype(np.float64)
    weight = None
    if header.get("mask", False):
        m = _read_payload(f"{stem}.mask.raw", count, np.uint8, "dims", name)
        weight = m.reshape(dims, order="F").astype(np.float64)
    return Volume(data, spacing, origin, weight)


# ------------------------------------------------------------------- stacks

def _pose_entry(pose):
    return None if pose is None else pose.to_list()


def write_stack(path, stack: SliceStack, *, provenance=None):
    """One stack: header with geometry and per-slice metadata, rasters concatenated."""
    stem = _stem(path)
    g = stack.grid
    header = {
        "format": "svrecon-stack",
        "version": FORMAT_VERSION,
        "orientation": stack.orientation_label,
        "grid": {"width": g.width, "height": g.height, "spacing": float(g.spacing)},
        "in_plane_spacing": float(stack.in_plane_spacing),
        "thickness": float(stack.slice_thickness),
        "gap": float(stack.slice_gap),
        "slice_count": len(stack),
        "dtype": "float32",
        "endianness": "little",
        "order": "x-fastest",
        "slices": [{"index_in_stack": int(s.index_in_stack),
                    "acquisition_time_index": int(s.acquisition_time_index),
                    "status": s.status,
                    "pose": _pose_entry(s.pose)} for s in stack.slices],
        "provenance": provenance or {},
    }
    data = np.stack([s.data for s in stack.slices]) if len(stack) else np.zeros((0, g.width, g.height))
    mask = np.stack([s.mask for s in stack.slices]) if len(stack) else np.zeros(data.shape, bool)
    atomic_write_bytes(f"{stem}.raw", np.transpose(data, (0, 2, 1)).astype(VOLUME_DTYPE).tobytes(order="C"))
    atomic_write_bytes(f"{stem}.mask.raw", np.transpose(mask, (0, 2, 1)).astype(np.uint8).tobytes(order="C"))
    atomic_write_json(f"{stem}.json", header)
    return Path(f"{stem}.json")


def read_stack(path) -> SliceStack:
    stem = _stem(path)
    name = Path(f"{stem}.json").name
    header = _read_header(f"{stem}.json", "svrecon-stack")
    grid_h = _require(header, "grid", name)
    if not isinstance(grid_h, dict):
        raise MalformedHeaderError(f"{name}: 'grid' must be an object", field="grid")
    w, h = _positive_ints([_require(grid_h, "width", name), _require(grid_h, "height", name)],
                          "grid", name, 2)
    count = _require(header, "slice_count", name)
    if not isinstance(count, int) or count < 0:
        raise MalformedHeaderError(f"{name}: 'slice_count' must be a nonnegative integer",
                                   field="slice_count")
    meta = _require(header, "slices", name)
    if not isinstance(meta, list) or len(meta) != count:
        raise DimsMismatchError(f"{name}: 'slices' lists {len(meta) if isinstance(meta, list) else '?'} "
                                f"entries but 'slice_count' is {count}", field="slice_count")
    _check_dtype(header, "float32", name)
    grid = PixelGrid(w, h, float(grid_h.get("spacing", 1.0)))
    n = count * w * h
    data = _read_payload(f"{stem}.raw", n, VOLUME_DTYPE, "slice_count", name)
    data = np.transpose(data.reshape(count, h, w), (0, 2, 1)).astype(np.float64)
    mask = _read_payload(f"{stem}.mask.raw", n, np.uint8, "slice_count", name)
    mask = np.transpose(mask.reshape(count, h, w), (0, 2, 1)).astype(bool)
    slices = []
    for k, m in enumerate(meta):
        try:
            pose = None if m.get("pose") is None else RigidTransform.from_list(m["pose"])
        except (TypeError, ValueError) as exc:
            raise MalformedHeaderError(f"{name}: slice {k} has an invalid pose ({exc})",
                                       field=f"slices[{k}].pose") from exc
        slices.append(Slice(grid, data[k], mask[k], int(m.get("index_in_stack", k)),
                            int(m.get("acquisition_time_index", k)), pose, m.get("status", "ok")))
    thickness = float(_require(header, "thickness", name))
    return SliceStack(slices, _require(header, "orientation", name), thickness,
                      float(header.get("in_plane_spacing", grid.spacing)),
                      float(header.get("gap", thickness)))


# ------------------------------------------------------ fields / transforms

def write_fields(path, fields):
    """Per-slice displacement fields of one grid size, float64."""
    stem = _stem(path)
    fields = list(fields)
    shapes = {f.data.shape for f in fields}
    if len(shapes) > 1:
        raise ValueError("all fields must share one grid size")
    w, h = (fields[0].width, fields[0].height) if fields else (1, 1)
    header = {
        "format": "svrecon-fields",
        "version": FORMAT_VERSION,
        "count": len(fields),
        "width": w,
        "height": h,
        "levels": [int(f.level) for f in fields],
        "dtype": "float64",
        "endianness": "little",
        "order": "component-fastest, then x, then y, then slice",
    }
    payload = np.stack([np.transpose(f.data, (1, 0, 2)) for f in fields]) if fields else np.zeros(0)
    atomic_write_bytes(f"{stem}.raw", np.ascontiguousarray(payload, dtype=FIELD_DTYPE).tobytes())
    atomic_write_json(f"{stem}.json", header)
    return Path(f"{stem}.json")


def read_fields(path):
    stem = _stem(path)
    name = Path(f"{stem}.json").name
    header = _read_header(f"{stem}.json", "svrecon-fields")
    count = _require(header, "count", name)
    if not isinstance(count, int) or count < 0:
        raise MalformedHeaderError(f"{name}: 'count' must be a nonnegative integer", field="count")
    w, h = _positive_ints([_require(header, "width", name), _require(header, "height", name)],
                          "width/height", name, 2)
    _check_dtype(header, "float64", name)
    levels = header.get("levels", [0] * count)
    if len(levels) != count:
        raise DimsMismatchError(f"{name}: 'levels' has {len(levels)} entries, 'count' is {count}",
                                field="levels")
    flat = _read_payload(f"{stem}.raw", count * w * h * 3, FIELD_DTYPE, "count", name)
    arr = flat.reshape(count, h, w, 3)
    return [DisplacementField(np.transpose(a, (1, 0, 2)).copy(), int(lv)) for a, lv in zip(arr, levels)]


def write_transforms(path, transforms):
    """Rigid poses as JSON rows of 12 numbers (rotation row-major, then translation)."""
    atomic_write_json(path, {"format": "svrecon-transforms", "version": FORMAT_VERSION,
                             "transforms": [t.to_list() for t in transforms]})
    return Path(path)


def read_transforms(path):
    header = _read_header(path, "svrecon-transforms")
    rows = _require(header, "transforms", Path(path).name)
    out = []
    for k, row in enumerate(rows):
        try:
            out.append(RigidTransform.from_list(row))
        except (TypeError, ValueError) as exc:
            raise MalformedHeaderError(f"{Path(path).name}: transform {k} is invalid ({exc})",
                                       field=f"transforms[{k}]") from exc
    return out


# ----------------------------------------------------------------- manifest

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def versions():
    import scipy

    from . import __version__
    from ._backend import BACKEND

    return {"svrecon": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "kernel_backend": BACKEND}


def write_manifest(out_dir, *, command, argv, config=None, seed=None, inputs=None, outputs=None,
                   name="manifest.json"):
    """``manifest.json`` with everything needed to re-run the command.

    No timestamps, so deterministic runs produce identical manifests.
    """
    config = config or {}
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config": config,
        "config_sha256": config_hash(config),
        "inputs": inputs or {},
        "outputs": sorted(outputs or []),
        "versions": versions(),
    }
    path = Path(out_dir) / name
    atomic_write_json(path, manifest)
    return path


def read_manifest(out_dir, name="manifest.json"):
    return json.loads((Path(out_dir) / name).read_text())


__all__ = [
    "FormatError", "MalformedHeaderError", "TruncatedPayloadError", "DtypeMismatchError",
    "DimsMismatchError", "atomic_write_bytes", "atomic_write_json", "write_volume", "read_volume",
    "write_stack", "read_stack", "write_fields", "read_fields", "write_transforms",
    "read_transforms", "write_manifest", "read_manifest", "config_hash", "versions",
]

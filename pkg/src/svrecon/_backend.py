"""Kernel backend selection.

The compiled extension is used when importable; ``SVRECON_BACKEND=python``
forces the numpy fallback.
"""

import os

from . import _kernels_py

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def available():
    names = ["python"]
    if _ckernels is not None:
        names.insert(0, "cython")
    return names


def get(name=None):
    name = name or os.environ.get("SVRECON_BACKEND", "auto")
    if name == "python":
        return _kernels_py
    if name in ("auto", "cython"):
        if _ckernels is not None:
            return _ckernels
        if name == "cython":
            raise ImportError("svrecon._ckernels is not built")
        return _kernels_py
    raise ValueError(f"unknown kernel backend {name!r}")


kernels = get()
BACKEND = "cython" if kernels is _ckernels else "python"

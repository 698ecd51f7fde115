"""Slice-to-volume reconstruction from motion-corrupted stacks of 2D slices."""

from ._backend import BACKEND
from .geometry import DisplacementField, PixelGrid, RigidTransform
from .sampling import PsfKernel, Volume

__version__ = "0.1.0"

__all__ = ["BACKEND", "DisplacementField", "PixelGrid", "RigidTransform", "PsfKernel", "Volume"]

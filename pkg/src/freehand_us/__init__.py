"""Freehand 3D ultrasound volumetry: calibration, tracking, compounding, meshing and verification."""

from freehand_us.errors import FreehandError, NumericalError, ValidationError
from freehand_us.geom import FrameId, RigidTransform, RoiBox, UsIntrinsics, compose, invert, pixel_to_us, transform_point
from freehand_us.recon import TrackedFrame, TriMesh, mesh_volume, reconstruct, sphericity

__all__ = [
    "FreehandError",
    "NumericalError",
    "ValidationError",
    "FrameId",
    "RigidTransform",
    "RoiBox",
    "UsIntrinsics",
    "compose",
    "invert",
    "pixel_to_us",
    "transform_point",
    "TrackedFrame",
    "TriMesh",
    "mesh_volume",
    "reconstruct",
    "sphericity",
]

__version__ = "0.1.0"

"""Geometry-aware prototype alignment for adapting a toy LiDAR BEV detector across domains."""
from ._kernels import backend
from .geometry import Box3D, Scene, group_index, offset_angle

__all__ = ["Box3D", "Scene", "backend", "group_index", "offset_angle"]
__version__ = "0.1.0"

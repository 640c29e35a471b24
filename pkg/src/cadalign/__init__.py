"""Scan-to-CAD alignment: NOC correspondences, differentiable Procrustes,
symmetry-aware evaluation and a synthetic benchmark harness."""

from .geometry import ObbBox, Pose9DoF, VoxelGrid, compose
from .procrustes import CorrespondenceSet, solve_rotation
from .symmetry import SymmetryClass

__version__ = "0.1.0"

__all__ = ["ObbBox", "Pose9DoF", "VoxelGrid", "compose", "CorrespondenceSet",
           "solve_rotation", "SymmetryClass"]

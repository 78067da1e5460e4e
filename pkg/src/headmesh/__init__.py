"""Adaptive tetrahedral head meshing with an EEG verification harness.

Nested closed tissue surfaces are turned into a labelled, conforming
tetrahedral mesh: a 5-tetrahedra lattice is labelled by solid angles,
refined near boundaries, re-labelled, then smoothed, inflated toward the
surfaces and optimised. The ``forward`` and ``localize`` subpackages score
meshes against layered-sphere references.
"""

from .mesh import TetrahedralMesh, read_mesh, validate_mesh, write_mesh
from .pipeline import PipelineConfig, PipelineError, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "PipelineError",
    "TetrahedralMesh",
    "read_mesh",
    "run_pipeline",
    "validate_mesh",
    "write_mesh",
]

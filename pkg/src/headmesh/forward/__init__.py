"""EEG forward modelling on tetrahedral meshes and analytic sphere references."""

from .analytic import (
    CoincidentPoints,
    DipoleOutsideBrain,
    FitNotConverged,
    LayeredSphereModel,
    ZeroVector,
    analytic_potential_homogeneous,
    analytic_potential_layered,
    berg_potential,
    fibonacci_sphere,
    fit_berg_parameters,
    homogeneous_sphere_potential,
    rdm_mag,
    series_potential,
    surface_coefficients,
)
from .fem import (
    ElectrodeSet,
    LeadField,
    MissingConductivity,
    PointLocator,
    PositionOutsideActive,
    SourceSpace,
    active_mask,
    assemble_system,
    compute_lead_field,
    dipole_rhs,
    mesh_checksum,
    restrict_sources,
    source_matrix,
)
from .solver import SolverDivergence, pcg
from .sphere import ARY_CONDUCTIVITIES, ARY_RADII, build_sphere_fixture, sphere_segmentation

__all__ = [
    "ARY_CONDUCTIVITIES",
    "ARY_RADII",
    "CoincidentPoints",
    "DipoleOutsideBrain",
    "ElectrodeSet",
    "FitNotConverged",
    "LayeredSphereModel",
    "LeadField",
    "MissingConductivity",
    "PointLocator",
    "PositionOutsideActive",
    "SolverDivergence",
    "SourceSpace",
    "ZeroVector",
    "active_mask",
    "analytic_potential_homogeneous",
    "analytic_potential_layered",
    "assemble_system",
    "berg_potential",
    "build_sphere_fixture",
    "compute_lead_field",
    "dipole_rhs",
    "fibonacci_sphere",
    "fit_berg_parameters",
    "homogeneous_sphere_potential",
    "mesh_checksum",
    "pcg",
    "rdm_mag",
    "restrict_sources",
    "series_potential",
    "source_matrix",
    "sphere_segmentation",
    "surface_coefficients",
]

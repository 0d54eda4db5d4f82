"""MAC finite-volume discretization of the stationary compressible
isentropic Navier-Stokes equations on Cartesian box unions."""

from .grid import DomainSpec, MacGrid, build_grid, mesh_size, regularity
from .fields import AnalyticFunction, CellField, FaceField, VelocityField

__version__ = "0.1.0"

__all__ = [
    "DomainSpec",
    "MacGrid",
    "build_grid",
    "mesh_size",
    "regularity",
    "AnalyticFunction",
    "CellField",
    "FaceField",
    "VelocityField",
]

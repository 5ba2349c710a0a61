"""feecflow: compatible finite elements for weakly compressible and incompressible 2D flow.

The package couples an explicit DG transport stage with an implicit,
hybridized pressure-viscosity solve on the compatible triple
(dP_r, RT_r, Lagrange_{r+1}), an a posteriori artificial-viscosity limiter,
and a benchmark harness for convergence, conservation, and low-Mach studies.
"""

from .mesh import Mesh, build_neighbor_stencils, generate_rect_mesh, import_gmsh_ascii
from .quadrature import QuadRule, edge_rule, triangle_rule
from .spaces import FeSpace, FieldVec, build_space, interpolate
from .stepper import GasLaw, NewtonControl, State

__all__ = [
    "Mesh",
    "QuadRule",
    "FeSpace",
    "FieldVec",
    "GasLaw",
    "NewtonControl",
    "State",
    "build_neighbor_stencils",
    "build_space",
    "edge_rule",
    "generate_rect_mesh",
    "import_gmsh_ascii",
    "interpolate",
    "triangle_rule",
]

__version__ = "0.1.0"

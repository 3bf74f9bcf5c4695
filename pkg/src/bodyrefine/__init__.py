"""Hierarchical refinement of a template body mesh against 2D image evidence.

The fit runs three stages on top of a uniform-Laplacian editing solver:
joint handles pulled toward annotated 2D joints, anchor handles pushed along
their normals to close silhouette gaps, then per-vertex depth detail from a
shading-based depth refinement.
"""

from .config import Config, ConfigError
from .deform import DeformProblem, HandleConstraint, solve_deform
from .fitting import FitInputs, FitResult, FitState, Stage, run_pipeline
from .mesh import TriMesh, build_laplacian, load_mesh, save_mesh, subdivide_midpoint
from .render import WeakPerspectiveCamera, project, rasterize

__all__ = [
    "Config", "ConfigError", "DeformProblem", "FitInputs", "FitResult", "FitState",
    "HandleConstraint", "Stage", "TriMesh", "WeakPerspectiveCamera", "build_laplacian",
    "load_mesh", "project", "rasterize", "run_pipeline", "save_mesh", "solve_deform",
    "subdivide_midpoint",
]
__version__ = "0.1.0"

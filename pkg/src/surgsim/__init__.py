"""Real-time soft-tissue simulation core: XPBD tetrahedral Neo-Hookean
elasticity, SDF instrument collision with Coulomb friction, and instrument
interactions (coagulation marking, cutting, grasping)."""

from .mesh import (
    MaterialParams,
    TetMesh,
    compute_rest_state,
    extract_surface,
    lame_from_young_poisson,
    load_mesh,
    vertex_masses_from_density,
)
from .solver import Engine, FrameTelemetry, SolverConfig, SolverState
from .tools import Tool, ToolGeometry, ToolPose, ToolsConfig

__all__ = [
    "Engine",
    "FrameTelemetry",
    "MaterialParams",
    "SolverConfig",
    "SolverState",
    "TetMesh",
    "Tool",
    "ToolGeometry",
    "ToolPose",
    "ToolsConfig",
    "compute_rest_state",
    "extract_surface",
    "lame_from_young_poisson",
    "load_mesh",
    "vertex_masses_from_density",
]

__version__ = "0.1.0"

"""Occupancy evaluation, marching cubes, vertex refinement and mesh metrics."""

from alto.mesh.marching import (
    Mesh,
    OccupancyVolume,
    evaluate_field,
    evaluate_grid,
    lattice_points,
    marching_cubes,
    refine_vertices,
)

__all__ = [
    "Mesh",
    "OccupancyVolume",
    "evaluate_field",
    "evaluate_grid",
    "lattice_points",
    "marching_cubes",
    "refine_vertices",
]

"""Occupancy-field reconstruction from point clouds with alternating point/grid latents."""

__version__ = "0.1.0"

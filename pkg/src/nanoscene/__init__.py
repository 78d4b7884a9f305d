"""Streaming ray tracer for procedurally populated mesoscale molecular scenes."""
from __future__ import annotations

from .accel import BlasTable, build_blas, build_cell_tlas, build_tlas, trace_any, trace_closest
from .grid import CachePool, CellCache, GridSpec, activation_window, cell_index, grid_min
from .population import populate_cell
from .render import ShadingParams, bake_texture_atlas, render_frame, sample_impostor
from .scene import Camera, Mesh, MeshInstance, MolecularModel, SceneConfig, load_config
from .session import Session
from .tiling import TileSet, build_tile_recipe, build_tileset, load_tileset, write_tileset
from .world import World

__version__ = "0.1.0"

__all__ = [
    "BlasTable", "CachePool", "Camera", "CellCache", "GridSpec", "Mesh", "MeshInstance", "MolecularModel",
    "SceneConfig", "Session", "ShadingParams", "TileSet", "World", "activation_window", "bake_texture_atlas",
    "build_blas", "build_cell_tlas", "build_tile_recipe", "build_tileset", "build_tlas", "cell_index",
    "grid_min", "load_config", "load_tileset", "populate_cell", "render_frame", "sample_impostor",
    "trace_any", "trace_closest", "write_tileset",
]

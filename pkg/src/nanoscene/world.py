"""Loaded scene: assets, grid, tile sets, recipes and world-space triangle data."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .geometry import hash64, matrix_to_quat, string_key, triangle_normals
from .grid import GridSpec
from .scene import (
    MeshInstance,
    SceneConfig,
    SceneError,
    compute_scene_aabb,
    load_mesh,
    load_molecular_model,
    load_skeleton,
)
from .tiling import TileRecipe, TileSet, build_tile_recipe, load_tileset, uv_jacobian


@dataclass(eq=False)
class InstanceGeometry:
    """World-space triangles of one mesh instance."""

    tris: np.ndarray  # (m, 3, 3)
    uvs: np.ndarray  # (m, 3, 2)
    normals: np.ndarray  # (m, 3)
    centroids: np.ndarray  # (m, 3)
    lo: np.ndarray  # (m, 3) per-triangle AABB
    hi: np.ndarray

    @cached_property
    def frames(self) -> np.ndarray:
        """Per-triangle rotation taking tile axes (x=u, y=up, z) to (T_u, normal, T_u x normal)."""
        out = np.empty((len(self.tris), 3, 3))
        for t in range(len(self.tris)):
            Tu, _ = uv_jacobian(self.tris[t], self.uvs[t])
            n = self.normals[t]
            x = Tu - np.dot(Tu, n) * n
            x /= np.linalg.norm(x)
            z = np.cross(x, n)
            out[t] = np.stack([x, n, z], axis=1)
        return out

    @cached_property
    def align_quats(self) -> np.ndarray:
        return matrix_to_quat(self.frames)

    @cached_property
    def normal_frames(self) -> np.ndarray:
        """Like ``frames`` but with z following increasing v, for mapping baked tile normals."""
        out = self.frames.copy()
        for t in range(len(self.tris)):
            _, Tv = uv_jacobian(self.tris[t], self.uvs[t])
            if np.dot(out[t][:, 2], Tv) < 0:
                out[t][:, 2] *= -1
        return out


class World:
    """Everything population and rendering read; immutable after construction."""

    def __init__(self, grid: GridSpec, models, meshes: dict, instances: list[MeshInstance],
                 tilesets: dict[str, TileSet] | None = None, seed: int = 0, cache_capacity: int = 1_000_000,
                 window_radius: int = 1, render: dict | None = None):
        self.grid = grid
        self.models = list(models)
        self.model_index = {m.model_id: n for n, m in enumerate(self.models)}
        if len(self.model_index) != len(self.models):
            raise SceneError("duplicate molecular model ids")
        self.meshes = dict(meshes)
        self.instances = list(instances)
        self.tilesets = dict(tilesets or {})
        self.seed = int(seed)
        self.cache_capacity = int(cache_capacity)
        self.window_radius = int(window_radius)
        self.render = dict(render or {})
        for n, inst in enumerate(self.instances):
            if inst.mesh_id not in self.meshes:
                raise SceneError(f"skeleton entry {n}: unknown mesh_id {inst.mesh_id!r}")
            if self.tilesets and inst.patch_id not in self.tilesets:
                raise SceneError(f"skeleton entry {n}: unknown patch_id {inst.patch_id!r}")
        self._remap = {}
        for pid, ts in self.tilesets.items():
            missing = [m for m in ts.models if m not in self.model_index]
            if missing:
                raise SceneError(f"tile set {pid!r} uses models not in the scene: {missing}")
            self._remap[pid] = np.array([self.model_index[m] for m in ts.models] or [0], dtype=np.int32)
        self._recipes: dict = {}
        self.tile_stacks: dict = {}
        self.geometry = [self._instance_geometry(i) for i in self.instances]
        tri_lists = [g.tris for g in self.geometry]
        self.all_tris = np.concatenate(tri_lists) if tri_lists else np.empty((0, 3, 3))
        self.tri_owner = np.concatenate(
            [np.stack([np.full(len(g.tris), n), np.arange(len(g.tris))], axis=1) for n, g in enumerate(self.geometry)]
        ) if self.geometry else np.empty((0, 2), dtype=np.int64)

    # ------------------------------------------------------------ construction

    @classmethod
    def from_config(cls, cfg: SceneConfig, tilesets: dict | None = None):
        a = cfg.assets
        models = []
        spec = a.get("models", {})
        items = spec.items() if isinstance(spec, dict) else [(None, p) for p in spec]
        for mid, p in items:
            models.append(load_molecular_model(cfg.asset_path(p), mid))
        meshes = {}
        for mid, p in a.get("meshes", {}).items():
            meshes[mid] = load_mesh(cfg.asset_path(p), mid)
        if tilesets is None:
            tilesets = {pid: load_tileset(cfg.asset_path(p)) for pid, p in a.get("tilesets", {}).items()}
        instances = []
        if a.get("skeleton"):
            instances = load_skeleton(cfg.asset_path(a["skeleton"]), set(meshes), set(tilesets) if tilesets else None)
        grid = cls.grid_for(cfg, instances, meshes)
        return cls(grid, models, meshes, instances, tilesets, cfg.seed, cfg.cache_capacity, cfg.window_radius,
                   cfg.render)

    @staticmethod
    def grid_for(cfg: SceneConfig, instances, meshes) -> GridSpec:
        if cfg.grid_dim is not None:
            return GridSpec(cfg.grid_dim, cfg.cell_size)
        # origin-centred grid just covering the scene box
        if instances:
            lo, hi = compute_scene_aabb(instances, meshes)
            reach = np.maximum(np.abs(lo), np.abs(hi))
        else:
            reach = np.zeros(3)
        dim = [max(1, 2 * math.ceil(r / s)) for r, s in zip(reach, cfg.cell_size)]
        return GridSpec(tuple(dim), cfg.cell_size)

    def _instance_geometry(self, inst: MeshInstance) -> InstanceGeometry:
        mesh = self.meshes[inst.mesh_id]
        tri = mesh.tri_positions
        wt = inst.transform(tri.reshape(-1, 3)).reshape(tri.shape)
        return InstanceGeometry(
            wt, np.asarray(mesh.tri_uvs, dtype=np.float64), triangle_normals(wt), wt.mean(axis=1),
            wt.min(axis=1), wt.max(axis=1),
        )

    # ------------------------------------------------------------ lookups

    def tileset_for(self, inst_idx: int) -> TileSet | None:
        return self.tilesets.get(self.instances[inst_idx].patch_id)

    def model_remap(self, inst_idx: int) -> np.ndarray:
        return self._remap[self.instances[inst_idx].patch_id]

    def recipe_for(self, inst_idx: int) -> TileRecipe | None:
        inst = self.instances[inst_idx]
        key = (inst.mesh_id, inst.patch_id)
        if key not in self._recipes:
            ts = self.tilesets.get(inst.patch_id)
            if ts is None or not ts.gw_tiles:
                self._recipes[key] = None
            else:
                seed = hash64(self.seed, string_key(inst.mesh_id), string_key(inst.patch_id))
                self._recipes[key] = build_tile_recipe(self.meshes[inst.mesh_id], ts.gw_tiles[0], seed, ts.gw_tiles)
        return self._recipes[key]

    @cached_property
    def blas_table(self):
        from .accel import BlasTable

        return BlasTable.from_assets(self.models, [self.meshes[k] for k in sorted(self.meshes)])

    def mesh_blas_index(self, mesh_id: str) -> int:
        from .accel import TRIANGLES

        return self.blas_table.index(mesh_id, TRIANGLES)

    @cached_property
    def model_colors(self) -> np.ndarray:
        return np.array([m.color for m in self.models], dtype=np.float64).reshape(-1, 3)

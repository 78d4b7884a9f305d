"""Frame-to-frame streaming: window updates, cell population, TLAS builds, rendering."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .accel import build_cell_tlas
from .grid import CachePool, activation_window, cell_index, update_active_set, window_box
from .population import populate_cell
from .render import ActiveCells, AtomTable, CellularScene, FrameResult, ShadingParams, frame_hash, render_frame
from .world import World


@dataclass
class FrameReport:
    frame: int
    camera_cell: tuple
    activated: int
    deactivated: int
    retained: int
    populated: int  # instances written into newly activated cells
    active_instances: int
    max_cell_instances: int
    overflow: int
    timings: dict = field(default_factory=dict)
    hash: str = ""

    def to_dict(self) -> dict:
        return {
            "frame": self.frame,
            "camera_cell": list(self.camera_cell),
            "activated": self.activated,
            "deactivated": self.deactivated,
            "retained": self.retained,
            "populated": self.populated,
            "active_instances": self.active_instances,
            "max_cell_instances": self.max_cell_instances,
            "overflow": self.overflow,
            "timings": {k: round(v, 3) for k, v in self.timings.items()},
            "hash": self.hash,
        }


class Session:
    """Keeps the active window, its caches and TLASes across frames."""

    def __init__(self, world: World, params: ShadingParams | None = None, atlases: dict | None = None,
                 single_structure: bool = False, strict: bool = False):
        self.world = world
        self.params = params or ShadingParams()
        self.single_structure = single_structure
        self.pool = CachePool(world.window_radius, world.cache_capacity, strict)
        self.tlases: dict = {}
        self.active: list = []
        self.frame = 0
        self.cellular = CellularScene.build(world, atlases) if world.instances else None
        self.atoms = AtomTable.of(world.models)

    def update(self, position):
        """Move the window to the camera; populate and build newly activated cells."""
        grid = self.world.grid
        window = activation_window(position, grid, self.world.window_radius)
        change = update_active_set(self.active, window)
        t0 = time.perf_counter()
        for c in change.deactivated:
            self.pool.release(c)
            del self.tlases[c]
        populated = 0
        build = 0.0
        for c in change.activated:
            cache = self.pool.acquire(c)
            populate_cell(c, self.world, cache)
            populated += len(cache)
            t1 = time.perf_counter()
            self.tlases[c] = build_cell_tlas(cache, self.world.blas_table)
            build += time.perf_counter() - t1
        self.active = list(window)
        pop = time.perf_counter() - t0 - build
        return change, populated, {"populate_ms": 1e3 * pop, "build_ms": 1e3 * build}

    def render(self, camera) -> tuple[FrameResult, FrameReport]:
        grid = self.world.grid
        cam_cell = cell_index(camera.position, grid)
        change, populated, timings = self.update(camera.position)
        active = ActiveCells.build(self.tlases, grid)
        res = render_frame(active, camera, self.world, self.params, self.cellular, window_box(self.active, grid),
                           self.single_structure, self.atoms)
        timings.update(res.timings)
        sizes = [len(self.pool.get(c)) for c in self.active]
        rep = FrameReport(
            self.frame, tuple(cam_cell), len(change.activated), len(change.deactivated), len(change.retained),
            populated, int(np.sum(sizes)), int(max(sizes, default=0)),
            int(sum(self.pool.get(c).overflow for c in self.active)), timings, frame_hash(res.rgb8),
        )
        self.frame += 1
        return res, rep

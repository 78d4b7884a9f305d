"""Uniform scene grid, the camera-centred activation window and per-cell caches."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .geometry import hash64


class GridError(ValueError):
    pass


class CacheOverflowError(RuntimeError):
    pass


class CellId(NamedTuple):
    i: int
    j: int
    k: int


def grid_min(dim, cell_size) -> np.ndarray:
    """Minimal grid corner of a grid centred on the origin."""
    return -np.asarray(cell_size, dtype=np.float64) * np.asarray(dim, dtype=np.float64) / 2.0


@dataclass(frozen=True)
class GridSpec:
    dim: tuple[int, int, int]
    cell_size: tuple[float, float, float]
    grid_min: tuple[float, float, float] = field(init=False)

    def __post_init__(self):
        dim = tuple(int(d) for d in self.dim)
        size = tuple(float(s) for s in self.cell_size)
        if len(dim) != 3 or min(dim) < 1:
            raise GridError(f"grid dimensions must be >= 1, got {dim}")
        if len(size) != 3 or min(size) <= 0:
            raise GridError(f"cell size must be positive, got {size}")
        object.__setattr__(self, "dim", dim)
        object.__setattr__(self, "cell_size", size)
        object.__setattr__(self, "grid_min", tuple(float(x) for x in grid_min(dim, size)))

    @property
    def min(self) -> np.ndarray:
        return np.array(self.grid_min)

    @property
    def max(self) -> np.ndarray:
        return self.min + np.array(self.cell_size) * np.array(self.dim)

    @property
    def size(self) -> np.ndarray:
        return np.array(self.cell_size)

    def in_range(self, cell) -> bool:
        return all(0 <= c < d for c, d in zip(cell, self.dim))

    def linear_index(self, cell) -> int:
        """Row-major index; ordering matches lexicographic ``(i, j, k)`` order."""
        i, j, k = cell
        return (int(i) * self.dim[1] + int(j)) * self.dim[2] + int(k)

    def cell_box(self, cell) -> tuple[np.ndarray, np.ndarray]:
        lo = cell_min(cell, self)
        return lo, cell_corners(np.asarray(cell) + 1, self)

    @property
    def n_cells(self) -> int:
        return self.dim[0] * self.dim[1] * self.dim[2]


def _check_cell(cell, grid: GridSpec) -> None:
    if len(cell) != 3 or not grid.in_range(cell):
        raise GridError(f"cell {tuple(cell)} outside grid of dimension {grid.dim}")


def cell_min(cell, grid: GridSpec) -> np.ndarray:
    _check_cell(cell, grid)
    return cell_corners(cell, grid)


def cell_center(cell, grid: GridSpec) -> np.ndarray:
    return cell_min(cell, grid) + grid.size / 2.0


def cell_corners(idx, grid: GridSpec) -> np.ndarray:
    """Minimal corners ``idx * size + grid_min`` of integer cell indices; no range check."""
    return np.asarray(idx, dtype=np.float64) * grid.size + grid.min


def cell_indices(points, grid: GridSpec) -> np.ndarray:
    """Vectorised index of points ``(n, 3)``; no range check.

    Cell ``k`` is the half-open interval between the corners of ``k`` and ``k + 1``
    as computed by ``cell_corners``, so a corner always maps back to its own cell
    even when the division rounds across an integer.
    """
    p = np.asarray(points, dtype=np.float64)
    k = np.floor((p - grid.min) / grid.size)
    k = np.where(np.isfinite(k), k, 0.0).astype(np.int64)
    k -= p < cell_corners(k, grid)
    k += p >= cell_corners(k + 1, grid)
    return k


def cell_index(point, grid: GridSpec) -> CellId:
    """Cell containing ``point``; a point on a shared face belongs to the higher cell."""
    idx = cell_indices(np.asarray(point, dtype=np.float64)[None, :], grid)[0]
    if not np.all(np.isfinite(point)) or not grid.in_range(idx):
        raise GridError(f"point {tuple(np.asarray(point).tolist())} lies outside the grid")
    return CellId(*(int(x) for x in idx))


def activation_window(camera_position, grid: GridSpec, radius: int) -> list[CellId]:
    """In-range cells within ``radius`` (Chebyshev) of the camera cell, row-major."""
    if radius < 0:
        raise GridError("window radius must be >= 0")
    c = cell_index(camera_position, grid)
    rng = [range(max(0, c[a] - radius), min(grid.dim[a], c[a] + radius + 1)) for a in range(3)]
    return [CellId(i, j, k) for i in rng[0] for j in rng[1] for k in rng[2]]


def window_box(cells, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box spanned by a set of cells."""
    idx = np.array(cells, dtype=np.int64)
    lo = cell_corners(idx.min(axis=0), grid)
    hi = cell_corners(idx.max(axis=0) + 1, grid)
    return lo, hi


def cell_seed(global_seed: int, cell) -> int:
    return hash64(global_seed, *cell)


class ActiveSetChange(NamedTuple):
    activated: list
    deactivated: list
    retained: list


def update_active_set(previous, window) -> ActiveSetChange:
    prev = set(previous)
    new = set(window)
    return ActiveSetChange(
        sorted(new - prev),
        sorted(prev - new),
        sorted(new & prev),
    )


class CellCache:
    """Growable record buffer for one active cell.

    Appends reserve a contiguous slot range through a lock-protected counter so
    that concurrent population work can write without coordination.
    """

    def __init__(self, capacity: int, strict: bool = False):
        self.capacity = int(capacity)
        self.strict = strict
        self._lock = threading.Lock()
        self._alloc = 0
        self.model_ids = np.empty(0, dtype=np.int32)
        self.positions = np.empty((0, 3))
        self.rotations = np.empty((0, 4))
        self.reset(None)

    def reset(self, cell) -> None:
        self.cell = cell
        self.write_counter = 0
        self.overflow = 0
        self.intersected_triangles: list[tuple[int, int]] = []
        self.closest_triangle: tuple[int, int] | None = None
        self.frozen = False

    def _reserve(self, n: int) -> tuple[int, int]:
        # caller holds the lock
        start = self.write_counter
        take = min(n, self.capacity - start)
        if take < n:
            if self.strict:
                raise CacheOverflowError(
                    f"cell {self.cell}: population needs {start + n} records, capacity is {self.capacity}"
                )
            self.overflow += n - take
        end = start + take
        if end > self._alloc:
            new = min(self.capacity, max(end, 2 * self._alloc, 1024))
            for name, shape in (("model_ids", ()), ("positions", (3,)), ("rotations", (4,))):
                old = getattr(self, name)
                buf = np.empty((new,) + shape, dtype=old.dtype)
                buf[:start] = old[:start]
                setattr(self, name, buf)
            self._alloc = new
        self.write_counter = end
        return start, end

    def append(self, model_ids, positions, rotations) -> int:
        if self.frozen:
            raise RuntimeError("cache is frozen")
        n = len(model_ids)
        if n == 0:
            return 0
        with self._lock:
            start, end = self._reserve(n)
            take = end - start
            self.model_ids[start:end] = np.asarray(model_ids)[:take]
            self.positions[start:end] = np.asarray(positions)[:take]
            self.rotations[start:end] = np.asarray(rotations)[:take]
        return take

    def __len__(self) -> int:
        return self.write_counter

    def records(self):
        n = self.write_counter
        return self.model_ids[:n], self.positions[:n], self.rotations[:n]

    def canonicalize(self) -> None:
        """Sort records by ``(model_id, x, y, z)`` so content is order independent."""
        m, p, r = self.records()
        order = np.lexsort((p[:, 2], p[:, 1], p[:, 0], m))
        n = len(order)
        self.model_ids[:n] = m[order]
        self.positions[:n] = p[order]
        self.rotations[:n] = r[order]

    def freeze(self) -> None:
        self.canonicalize()
        self.frozen = True

    def digest(self) -> bytes:
        import hashlib

        m, p, r = self.records()
        h = hashlib.sha256()
        for a in (m, p, r):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.digest()


class CachePool:
    """Fixed set of ``(2r+1)^3`` reusable cache buffers."""

    def __init__(self, radius: int, capacity: int, strict: bool = False):
        self.size = (2 * radius + 1) ** 3
        self.capacity = capacity
        self._free = [CellCache(capacity, strict) for _ in range(self.size)]
        self._used: dict = {}

    def acquire(self, cell) -> CellCache:
        if cell in self._used:
            raise GridError(f"cell {cell} already holds a cache")
        if not self._free:
            raise GridError("cache pool exhausted")
        cache = self._free.pop()
        cache.reset(cell)
        self._used[cell] = cache
        return cache

    def release(self, cell) -> None:
        cache = self._used.pop(cell)
        cache.reset(None)
        self._free.append(cache)

    def get(self, cell) -> CellCache:
        return self._used[cell]

    def __contains__(self, cell) -> bool:
        return cell in self._used

    @property
    def active(self):
        return dict(self._used)

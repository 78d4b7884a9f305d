"""Cell population: membrane instances from GW tiles projected onto mesh
triangles, soluble instances from box tiles cropped to the mesh interior.

Every candidate position is computed from the triangle, recipe slot and tile
instance alone, never from the cell being populated, so populating cells one
by one or a merged region in one pass yields bit-identical instances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .geometry import hash64, quat_mul, quat_normalize, triangles_overlap_box
from .grid import CellCache, GridSpec, cell_corners, cell_indices, cell_min, cell_seed
from .tiling import compute_subgrid
from .world import World

INSIDE = "inside"
OUTSIDE = "outside"


@dataclass(eq=False)
class CellGeometry:
    cells: tuple  # the cell, or every cell of a merged region
    box: tuple[np.ndarray, np.ndarray]
    triangles: np.ndarray  # (k, 2) rows of (mesh instance, triangle index) = I_c
    closest_triangle: tuple[int, int] | None
    intersected_meshes: set = field(default_factory=set)

    @property
    def cell(self):
        return self.cells[0]

    def __len__(self) -> int:
        return len(self.triangles)


def _region_box(cells, grid: GridSpec):
    idx = np.array(cells, dtype=np.int64).reshape(-1, 3)
    lo = cell_min(tuple(idx.min(axis=0)), grid)
    hi = cell_corners(idx.max(axis=0) + 1, grid)
    return lo, hi


def compute_cell_geometry(cell, world: World, cells=None) -> CellGeometry:
    """Triangles intersecting the cell (or the box of ``cells``) and the scene triangle nearest its centre."""
    cells = tuple(tuple(c) for c in (cells if cells is not None else [cell]))
    lo, hi = _region_box(cells, world.grid)
    rows = []
    for n, g in enumerate(world.geometry):
        cand = np.nonzero(np.all((g.hi >= lo) & (g.lo < hi), axis=1))[0]
        if len(cand):
            ok = triangles_overlap_box(g.tris[cand], lo, hi)
            rows.extend((n, int(t)) for t in cand[ok])
    tri = np.array(rows, dtype=np.int64).reshape(-1, 2)
    closest = None
    if len(world.all_tris):
        center = 0.5 * (lo + hi)
        idx, _ = K.nearest_triangle(center[None, :], world.all_tris)
        closest = tuple(int(x) for x in world.tri_owner[idx[0]])
    return CellGeometry(cells, (lo, hi), tri, closest, {int(n) for n in tri[:, 0]})


# ---------------------------------------------------------------- membrane


def _orient(ax, ay, bx, by, qx, qy):
    return (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)


def _edge_terms(uv, qu, qv):
    """Signed, canonically ordered edge tests for points against a uv triangle.

    Each edge is evaluated with its endpoints in lexicographic order so that
    the two triangles sharing it compute bit-identical values; an on-edge point
    belongs to the triangle lying on the positive side of the ordered edge.
    Returns ``(inside mask, barycentrics (n, 3))``.
    """
    inside = np.ones(len(qu), dtype=bool)
    lam = np.empty((len(qu), 3))
    area2 = abs(_orient(uv[0, 0], uv[0, 1], uv[1, 0], uv[1, 1], uv[2, 0], uv[2, 1]))
    for k in range(3):
        a = uv[(k + 1) % 3]
        b = uv[(k + 2) % 3]
        if (a[0], a[1]) > (b[0], b[1]):
            a, b = b, a
        side = _orient(a[0], a[1], b[0], b[1], uv[k, 0], uv[k, 1])
        s = 1.0 if side > 0 else -1.0
        o = _orient(a[0], a[1], b[0], b[1], qu, qv)
        inside &= (s * o > 0) | ((o == 0) & (s > 0))
        lam[:, k] = s * o / area2
    return inside, lam


@dataclass
class _TileStack:
    """All instances of a tile list, concatenated for vectorised gathers."""

    coords: np.ndarray
    models: np.ndarray
    rots: np.ndarray
    start: np.ndarray
    count: np.ndarray

    @classmethod
    def of(cls, tiles, remap):
        counts = np.array([len(t) for t in tiles], dtype=np.int64)
        start = np.concatenate([[0], np.cumsum(counts)[:-1]]) if len(tiles) else np.empty(0, np.int64)
        dim = tiles[0].coords.shape[1] if tiles else 2
        coords = np.concatenate([t.coords for t in tiles]) if tiles else np.empty((0, dim))
        models = np.concatenate([t.model_ids for t in tiles]) if tiles else np.empty(0, np.int32)
        rots = np.concatenate([t.rotations for t in tiles]) if tiles else np.empty((0, 4))
        return cls(coords, remap[models] if len(models) else models.astype(np.int32), rots, start, counts)

    def gather(self, slot_tiles):
        """Instance indices for a sequence of slots, plus the slot of each instance."""
        cnt = self.count[slot_tiles]
        total = int(cnt.sum())
        slot_of = np.repeat(np.arange(len(slot_tiles)), cnt)
        first = np.repeat(self.start[slot_tiles], cnt)
        offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        return first + offs, slot_of


def _stack(world: World, inst: int, kind: str) -> _TileStack:
    pid = world.instances[inst].patch_id
    key = (pid, kind)
    hit = world.tile_stacks.get(key)
    if hit is None:
        ts = world.tilesets[pid]
        tiles = sorted(ts.gw_tiles if kind == "gw" else ts.box_tiles, key=lambda t: t.tile_id)
        if [t.tile_id for t in tiles] != list(range(len(tiles))):
            raise ValueError(f"tile set {ts.set_id!r}: tile ids must be dense 0..n-1")
        hit = world.tile_stacks[key] = _TileStack.of(tiles, world.model_remap(inst))
    return hit


def membrane_candidates(world: World, inst: int, tri: int):
    """Every tile instance projected onto one triangle and kept by the barycentric crop.

    Returns ``(model_ids, positions, rotations, barycentrics)``.
    """
    recipe = world.recipe_for(inst)
    empty = (np.empty(0, np.int32), np.empty((0, 3)), np.empty((0, 4)), np.empty((0, 3)))
    if recipe is None:
        return empty
    g = world.geometry[inst]
    uv = g.uvs[tri]
    P = g.tris[tri]
    sg = compute_subgrid(uv, recipe)
    U, V = recipe.dims
    au = np.arange(sg.tile_ref[0], min(sg.tile_ref[0] + sg.rep_u, U))
    bv = np.arange(sg.tile_ref[1], min(sg.tile_ref[1] + sg.rep_v, V))
    if len(au) == 0 or len(bv) == 0:
        return empty
    A, B = np.meshgrid(au, bv, indexing="ij")
    A = A.ravel()
    B = B.ravel()
    stack = _stack(world, inst, "gw")
    idx, slot = stack.gather(recipe.entries[A, B])
    if len(idx) == 0:
        return empty
    c = stack.coords[idx]
    size = recipe.tile_uvsize
    qu = (A[slot] + c[:, 0]) * size[0]
    qv = (B[slot] + c[:, 1]) * size[1]
    keep, lam = _edge_terms(uv, qu, qv)
    lam = lam[keep]
    pos = lam[:, 0:1] * P[0] + lam[:, 1:2] * P[1] + lam[:, 2:3] * P[2]
    rot = quat_normalize(quat_mul(g.align_quats[tri], stack.rots[idx[keep]]))
    return stack.models[idx[keep]], pos, rot, lam


def _in_region(pos, cells, grid):
    ci = cell_indices(pos, grid)
    if len(cells) == 1:
        return np.all(ci == np.asarray(cells[0]), axis=1)
    lin = (ci[:, 0] * grid.dim[1] + ci[:, 1]) * grid.dim[2] + ci[:, 2]
    want = np.array([grid.linear_index(c) for c in cells])
    valid = np.all((ci >= 0) & (ci < np.array(grid.dim)), axis=1)
    return valid & np.isin(lin, want)


def populate_membrane(cell, geometry: CellGeometry, world: World, cache: CellCache) -> int:
    """Append membrane instances of every triangle in I_c that fall inside the cell(s)."""
    added = 0
    for inst, tri in geometry.triangles:
        m, p, r, _ = membrane_candidates(world, int(inst), int(tri))
        if len(m) == 0:
            continue
        ok = _in_region(p, geometry.cells, world.grid)
        if np.any(ok):
            added += cache.append(m[ok], p[ok], r[ok])
    return added


# ---------------------------------------------------------------- solubles


def half_space(points, tris, normals, centroids) -> np.ndarray:
    """Inside mask: offset from the nearest triangle's centroid points against its normal."""
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=bool), np.zeros(0, dtype=np.int64)
    idx, _ = K.nearest_triangle(pts, np.ascontiguousarray(tris))
    d = np.einsum("ij,ij->i", pts - centroids[idx], normals[idx])
    return d < 0, idx


def _gather_tris(world: World, rows):
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    tris = np.empty((len(rows), 3, 3))
    nrm = np.empty((len(rows), 3))
    cen = np.empty((len(rows), 3))
    for n, (i, t) in enumerate(rows):
        g = world.geometry[i]
        tris[n], nrm[n], cen[n] = g.tris[t], g.normals[t], g.centroids[t]
    return tris, nrm, cen


def cell_classification(geometry: CellGeometry, world: World) -> str:
    """Whole-cell label from the closest triangle, used when I_c is empty."""
    if geometry.closest_triangle is None:
        return OUTSIDE
    lo, hi = geometry.box
    tris, nrm, cen = _gather_tris(world, [geometry.closest_triangle])
    inside, _ = half_space(0.5 * (lo + hi), tris, nrm, cen)
    return INSIDE if inside[0] else OUTSIDE


def inside_test(position, geometry: CellGeometry, world: World):
    """``inside``/``outside`` per position (a single label for a single point)."""
    pts = np.asarray(position, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    if len(geometry.triangles):
        tris, nrm, cen = _gather_tris(world, geometry.triangles)
        inside, _ = half_space(pts, tris, nrm, cen)
        labels = np.where(inside, INSIDE, OUTSIDE)
    else:
        labels = np.full(len(pts), cell_classification(geometry, world))
    return str(labels[0]) if single else labels


def box_repetition(cell_size, box_size) -> tuple[int, int, int]:
    return tuple(int(math.ceil(c / b - 1e-12)) for c, b in zip(cell_size, box_size))


def soluble_candidates(cell, world: World, inst: int):
    """All box-tile instance positions inside one cell for one mesh instance's tile set."""
    ts = world.tileset_for(inst)
    empty = (np.empty(0, np.int32), np.empty((0, 3)), np.empty((0, 4)))
    if ts is None or not ts.box_tiles:
        return empty
    grid = world.grid
    size_b = np.array(ts.box_world_size)
    if np.any(size_b > grid.size):
        raise ValueError(f"tile set {ts.set_id!r}: box tile {tuple(size_b)} exceeds the cell size {tuple(grid.size)}")
    rep = box_repetition(grid.size, size_b)
    stack = _stack(world, inst, "box")
    seed = cell_seed(world.seed, cell)
    slots = np.array([(x, y, z) for x in range(rep[0]) for y in range(rep[1]) for z in range(rep[2])])
    choice = np.array([hash64(seed, inst, *s) % len(ts.box_tiles) for s in slots], dtype=np.int64)
    idx, slot = stack.gather(choice)
    base = cell_min(cell, grid)
    pos = base + (slots[slot] + stack.coords[idx]) * size_b
    ok = np.all(cell_indices(pos, grid) == np.asarray(cell), axis=1)
    return stack.models[idx[ok]], pos[ok], stack.rots[idx[ok]]


def populate_solubles(cell, geometry: CellGeometry, world: World, cache: CellCache) -> int:
    """Append box-tile instances of the cell that the half-space test places inside a mesh.

    With intersecting triangles each candidate is tested against its nearest
    triangle in I_c and kept only for the mesh instance owning that triangle.
    Without them the closest triangle classifies the whole cell.
    """
    added = 0
    if len(geometry.triangles):
        tris, nrm, cen = _gather_tris(world, geometry.triangles)
        owner = geometry.triangles[:, 0]
        for inst in sorted(geometry.intersected_meshes):
            m, p, r = soluble_candidates(cell, world, inst)
            if len(m) == 0:
                continue
            inside, near = half_space(p, tris, nrm, cen)
            ok = inside & (owner[near] == inst)
            added += cache.append(m[ok], p[ok], r[ok])
    elif geometry.closest_triangle is not None and cell_classification(geometry, world) == INSIDE:
        m, p, r = soluble_candidates(cell, world, geometry.closest_triangle[0])
        added += cache.append(m, p, r)
    return added


# ---------------------------------------------------------------- driver


@dataclass
class PopulationStats:
    cell: tuple
    membrane: int
    soluble: int
    triangles: int
    classification: str
    overflow: int


def populate_cell(cell, world: World, cache: CellCache | None = None, strict: bool = False):
    """Fill (and freeze) a cache for one cell; returns ``(cache, stats)``."""
    cell = tuple(int(c) for c in cell)
    if cache is None:
        cache = CellCache(world.cache_capacity, strict=strict)
    cache.reset(cell)
    geom = compute_cell_geometry(cell, world)
    cache.intersected_triangles = [tuple(map(int, r)) for r in geom.triangles]
    cache.closest_triangle = geom.closest_triangle
    mem = populate_membrane(cell, geom, world, cache)
    sol = populate_solubles(cell, geom, world, cache)
    cache.freeze()
    if len(geom.triangles):
        label = "intersected"
    else:
        label = cell_classification(geom, world)
    return cache, PopulationStats(cell, mem, sol, len(geom.triangles), label, cache.overflow)


def populate_region_membrane(cells, world: World):
    """Membrane instances of a box of cells in one pass, canonically sorted."""
    cells = [tuple(int(x) for x in c) for c in cells]
    geom = compute_cell_geometry(None, world, cells)
    cache = CellCache(10**9)
    cache.reset(("region",))
    populate_membrane(None, geom, world, cache)
    cache.canonicalize()
    m, p, r = cache.records()
    return m.copy(), p.copy(), r.copy()


def canonical_records(records):
    """Concatenate record triples and sort by ``(model_id, x, y, z)``."""
    recs = [r for r in records if len(r[0])]
    if not recs:
        return np.empty(0, np.int32), np.empty((0, 3)), np.empty((0, 4))
    m = np.concatenate([r[0] for r in recs])
    p = np.concatenate([r[1] for r in recs])
    q = np.concatenate([r[2] for r in recs])
    order = np.lexsort((p[:, 2], p[:, 1], p[:, 0], m))
    return m[order], p[order], q[order]


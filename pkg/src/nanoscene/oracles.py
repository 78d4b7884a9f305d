"""Independent reference implementations used by tests and ``nanoscene validate``.

Nothing here shares traversal code with the production path: hits come from
plain numpy scans, inside/outside from ray parity, and scene generators build
their own random content.
"""
from __future__ import annotations

import numpy as np

from .geometry import hash64, quat_normalize
from .grid import CellCache, GridSpec, cell_seed
from .scene import MolecularModel


def sphere_scan(origins, dirs, centers, radii, t_min=0.0):
    """Closest sphere per ray by linear scan: ``(t, index)``, -1 on a miss; ties go to the lowest index."""
    O = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    D = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    C = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    r = np.asarray(radii, dtype=np.float64)
    best_t = np.full(len(O), np.inf)
    best_i = np.full(len(O), -1, np.int64)
    for k in range(len(C)):
        oc = O - C[k]
        b = np.einsum("ij,ij->i", oc, D)
        c = np.einsum("ij,ij->i", oc, oc) - r[k] * r[k]
        disc = b * b - c
        ok = disc >= 0
        s = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - s
        t1 = -b + s
        t = np.where(t0 > t_min, t0, np.where(t1 > t_min, t1, np.inf))
        t = np.where(ok, t, np.inf)
        better = t < best_t
        best_t = np.where(better, t, best_t)
        best_i = np.where(better, k, best_i)
    return np.where(best_i >= 0, best_t, -1.0), best_i


def triangle_scan(origins, dirs, tris, t_min=0.0):
    """All ray/triangle crossings counted per ray, plus closest ``(t, index)``."""
    O = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    D = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    T = np.asarray(tris, dtype=np.float64).reshape(-1, 3, 3)
    count = np.zeros(len(O), np.int64)
    best_t = np.full(len(O), np.inf)
    best_i = np.full(len(O), -1, np.int64)
    for k in range(len(T)):
        a, b, c = T[k]
        e1, e2 = b - a, c - a
        p = np.cross(D, e2)
        det = p @ e1
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            s = O - a
            u = np.einsum("ij,ij->i", s, p) * inv
            q = np.cross(s, e1)
            v = np.einsum("ij,ij->i", D, q) * inv
            t = (q @ e2) * inv
        ok = (det != 0) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min)
        count += ok
        better = ok & (t < best_t)
        best_t = np.where(better, t, best_t)
        best_i = np.where(better, k, best_i)
    return count, np.where(best_i >= 0, best_t, -1.0), best_i


def parity_inside(points, tris, direction=(0.5773502691896258, 0.6123724356957945, 0.5400617248673217)):
    """Inside mask by ray parity against a closed triangle mesh."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    count, _, _ = triangle_scan(P, np.tile(d, (len(P), 1)), tris)
    return count % 2 == 1


def instance_spheres(models, model_ids, positions, rotations):
    """World atom spheres of instances, with ``(instance, atom)`` ids per sphere."""
    from .geometry import quat_to_matrix

    cs, rs, inst, atom = [], [], [], []
    if len(model_ids) == 0:
        return np.empty((0, 3)), np.empty(0), np.empty(0, np.int64), np.empty(0, np.int64)
    mats = quat_to_matrix(np.asarray(rotations, dtype=np.float64).reshape(-1, 4))
    for n, (m, p) in enumerate(zip(model_ids, positions)):
        mod = models[int(m)]
        cs.append(mod.positions @ mats[n].T + p)
        rs.append(mod.radii)
        inst.append(np.full(len(mod.radii), n))
        atom.append(np.arange(len(mod.radii)))
    return np.concatenate(cs), np.concatenate(rs), np.concatenate(inst), np.concatenate(atom)


def box_tile_count(cell, world, inst: int = 0) -> int:
    """Instances a fully interior cell receives, counted slot by slot.

    Each box slot picks its tile by hashing; when the box size divides the cell
    this is the plain sum of the chosen tiles' sizes, otherwise instances of the
    last slots that overhang the cell's upper faces are dropped.
    """
    ts = world.tileset_for(inst)
    if ts is None or not ts.box_tiles:
        return 0
    size_c = np.asarray(world.grid.size, dtype=np.float64)
    size_b = np.asarray(ts.box_world_size, dtype=np.float64)
    lo, hi = world.grid.cell_box(cell)
    rep = [int(np.ceil(c / b - 1e-12)) for c, b in zip(size_c, size_b)]
    by_id = {t.tile_id: t for t in ts.box_tiles}
    seed = cell_seed(world.seed, cell)
    total = 0
    for x in range(rep[0]):
        for y in range(rep[1]):
            for z in range(rep[2]):
                tile = by_id[hash64(seed, inst, x, y, z) % len(ts.box_tiles)]
                pos = lo + (np.array([x, y, z]) + tile.coords) * size_b
                total += int(np.sum(np.all(pos < hi, axis=1)))
    return total


# ---------------------------------------------------------------- random scenes


def random_models(rng, n_models=3, max_atoms=40):
    out = []
    for m in range(n_models):
        k = int(rng.integers(1, max_atoms + 1))
        pos = rng.normal(scale=4.0, size=(k, 3))
        rad = rng.uniform(1.0, 2.5, k)
        out.append(MolecularModel(f"m{m}", pos, rad, tuple(rng.uniform(0.2, 1.0, 3))))
    return out


def random_cell_caches(rng, grid: GridSpec, cells, models, n_instances, boundary_fraction=0.3):
    """Random instances in each cell; some hug the cell faces so atoms straddle boundaries."""
    caches = {}
    per = max(1, n_instances // max(1, len(cells)))
    for c in cells:
        lo, hi = grid.cell_box(c)
        size = grid.size
        u = rng.random((per, 3))
        hug = rng.random(per) < boundary_fraction
        axis = rng.integers(0, 3, per)
        side = rng.integers(0, 2, per)
        u[hug, axis[hug]] = np.where(side[hug] == 0, rng.random(hug.sum()) * 0.01, 1 - rng.random(hug.sum()) * 0.01)
        u = np.minimum(u, np.nextafter(1.0, 0.0))
        pos = lo + u * size
        ok = np.all((pos >= lo) & (pos < hi), axis=1)
        pos = pos[ok]
        ids = rng.integers(0, len(models), len(pos)).astype(np.int32)
        rot = quat_normalize(rng.normal(size=(len(pos), 4)))
        cache = CellCache(10**9)
        cache.reset(tuple(c))
        cache.append(ids, pos, rot)
        cache.freeze()
        caches[tuple(c)] = cache
    return caches

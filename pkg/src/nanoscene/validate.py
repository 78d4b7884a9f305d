"""Oracle suites: each check compares the production path with an independent reference."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import demo, oracles
from .accel import BlasTable, build_blas, build_cell_tlas, build_tlas, pack_tlases, trace_closest_batch
from .geometry import quat_normalize
from .grid import GridSpec, cell_index, cell_indices, cell_min, grid_min
from .population import compute_cell_geometry, inside_test, populate_cell
from .render import ActiveCells, composite_buffers, render_merged, render_pass1
from .scene import Camera, MeshInstance, MolecularModel
from .tiling import build_tile_recipe, recipe_adjacency_violations, seam_violations
from .world import World


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.2f}s)"


# ---------------------------------------------------------------- individual checks


def check_grid(rng, trials: int = 1) -> tuple[bool, str]:
    dim, size = (200, 200, 200), (2000.0, 2000.0, 2000.0)
    g = GridSpec(dim, size)
    ok = np.array_equal(grid_min(dim, size), np.full(3, -200000.0)) and tuple(cell_index((0, 0, 0), g)) == (100, 100, 100)
    small = GridSpec((5, 5, 5), (3.0, 7.0, 11.0))
    bad = 0
    n = 0
    for _ in range(max(1, trials)):
        cells = rng.integers(0, 5, (20000, 3))
        frac = rng.random((20000, 3))
        pts = cells * small.size + small.min + frac * small.size
        # rounding can push a point onto the next cell's face; keep strict interiors only
        inside = np.all((pts >= cells * small.size + small.min) & (pts < (cells + 1) * small.size + small.min), axis=1)
        bad += int(np.sum(np.any(cell_indices(pts[inside], small) != cells[inside], axis=1)))
        n += int(inside.sum())
        for c in map(tuple, rng.integers(0, 5, (50, 3))):
            bad += tuple(cell_index(cell_min(c, small), small)) != c
    return ok and bad == 0, f"grid_min/origin ok={ok}, {bad} round-trip failures over {n} points"


def bvh_trial(rng, n_rays: int = 2000, max_spheres: int = 200):
    """Random spheres in one BLAS, instanced once; returns (id mismatches, max relative depth error)."""
    k = int(rng.integers(1, max_spheres + 1))
    model = MolecularModel("s", rng.uniform(-20, 20, (k, 3)), rng.uniform(0.3, 4.0, k))
    table = BlasTable([build_blas(model)])
    pos = rng.uniform(-5, 5, 3)
    rot = quat_normalize(rng.normal(size=4))
    tl = build_tlas([0], rot[None], pos[None], table)
    O = rng.uniform(-40, 40, (n_rays, 3))
    tgt = rng.uniform(-20, 20, (n_rays, 3)) + pos
    D = tgt - O
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    t, i, p, _, _ = trace_closest_batch(O, D, pack_tlases([tl]), table, 0, 0.0, np.inf)
    c, r, _, atom = oracles.instance_spheres([model], [0], pos[None], rot[None])
    tr, ir = oracles.sphere_scan(O, D, c, r)
    ids = np.where(ir >= 0, atom[np.maximum(ir, 0)], -1)
    mism = int(np.sum(ids != p))
    both = (ir >= 0) & (p >= 0)
    err = float(np.max(np.abs(t[both] - tr[both]) / np.maximum(np.abs(tr[both]), 1e-300), initial=0.0))
    return mism, err


def check_bvh(rng, trials: int = 5) -> tuple[bool, str]:
    mism, err = 0, 0.0
    for _ in range(trials):
        m, e = bvh_trial(rng)
        mism += m
        err = max(err, e)
    return mism == 0 and err <= 1e-9, f"{mism} id mismatches, max rel depth err {err:.2e}"


def sortlast_scene(rng, n_instances: int = 2000, cell: float = 60.0, size: int = 64):
    """Random 3^3-cell scene with a camera in the centre cell; returns (active, camera, table, caches)."""
    models = oracles.random_models(rng)
    grid = GridSpec((3, 3, 3), (cell, cell, cell))
    cells = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]
    caches = oracles.random_cell_caches(rng, grid, cells, models, n_instances)
    table = BlasTable.from_assets(models)
    tlases = {c: build_cell_tlas(caches[c], table) for c in cells}
    active = ActiveCells.build(tlases, grid)
    eye = rng.uniform(-0.4, 0.4, 3) * cell
    look = eye + rng.normal(size=3)
    cam = Camera(tuple(eye), tuple(look), (0.0, 1.0, 0.0) if abs(look[1] - eye[1]) < 0.9 * np.linalg.norm(look - eye)
                 else (1.0, 0.0, 0.0), float(rng.uniform(50, 100)), size, size)
    return active, cam, table, caches


def sortlast_trial(rng, n_instances=2000, size=64, inject_fault=False):
    """Pixels where composited pass-1 buffers and the merged trace disagree."""
    active, cam, table, _ = sortlast_scene(rng, n_instances, size=size)
    bufs = render_pass1(active, cam, table)
    if inject_fault:
        # corrupt a pixel in the buffer that wins it, so the error reaches the composite
        won = np.argwhere(composite_buffers(bufs).slot >= 0)
        if len(won):
            y, x = won[0]
            bufs[composite_buffers(bufs).slot[y, x]].instance[y, x] += 1
    comp = composite_buffers(bufs)
    ref = render_merged(active, cam, table)
    diff = ((comp.depth != ref.depth) | (comp.slot != ref.slot) | (comp.instance != ref.instance)
            | (comp.atom != ref.atom))
    return int(diff.sum()), int(comp.hit.sum())


def check_sortlast(rng, trials: int = 5, inject_fault: bool = False) -> tuple[bool, str]:
    bad, hits = 0, 0
    for n in range(trials):
        b, h = sortlast_trial(rng, inject_fault=inject_fault and n == 0)
        bad += b
        hits += h
    return bad == 0, f"{bad} mismatching pixels ({hits} hit pixels, {trials} scenes)"


def check_wang(rng, trials: int = 1, tileset=None, mesh=None, models=None, atlas=None,
               resolution: int = 32) -> tuple[bool, str]:
    """Recipe adjacency, shared-strip instance sets and baked strip texels on a 64x64 recipe."""
    from .render import ShadingParams, bake_texture_atlas
    from .tiling import build_tileset

    if tileset is None:
        models = {m.model_id: m for m in (demo.lipid_model(), demo.protein_model())}
        tileset = build_tileset("check", [demo.membrane_rules(600, 250.0)], int(rng.integers(2**31)), models)
    if atlas is None and models is not None:
        atlas = bake_texture_atlas(tileset, models, ShadingParams(bake_ao_rays=4), resolution)
    bad_adj = bad_seam = bad_px = 0
    for _ in range(max(1, trials)):
        size = (tileset.gw_world_size[0] * 64.0 * 0.999, tileset.gw_world_size[1] * 64.0 * 0.999)
        quad = mesh or demo.quad_mesh(*size)
        rec = build_tile_recipe(quad, tileset.gw_tiles[0], int(rng.integers(2**31)), tileset.gw_tiles)
        bad_adj += len(recipe_adjacency_violations(rec, tileset.gw_tiles))
        bad_seam += len(seam_violations(rec, tileset))
        if atlas is not None:
            bad_px += atlas_seam_violations(rec, tileset, atlas)
    px = f", {bad_px} strip texel mismatches" if atlas is not None else ", atlas not checked"
    return bad_adj == 0 and bad_seam == 0 and bad_px == 0, f"{bad_adj} adjacency and {bad_seam} seam violations{px}"


def atlas_seam_violations(recipe, ts, atlas) -> int:
    """Strip texels that differ between recipe neighbours or from another tile with the same edge color.

    Texel ``i`` sits at ``i W / (R - 1)``; strip texels lie within half a strip
    width of their edge, so the seam texels of neighbours coincide in space.
    """
    R = atlas.resolution
    hu, hv = ts.strip_halfwidth()
    W, H = atlas.world_size
    i = np.arange(R)
    lo_u = i * (W / (R - 1)) < 0.5 * hu * W
    lo_v = i * (H / (R - 1)) < 0.5 * hv * H
    hi_u, hi_v = lo_u[::-1], lo_v[::-1]
    layers = (atlas.diffuse, atlas.coverage, atlas.normal, atlas.ao)

    def img(tid):  # [u, v] view of every layer
        x0, y0 = atlas.origins[tid]
        return [L[y0:y0 + R, x0:x0 + R].swapaxes(0, 1) for L in layers]

    def ne(a, b):
        return int(sum(np.sum(np.any((x != y).reshape(x.shape[0], x.shape[1], -1), axis=2)) for x, y in zip(a, b)))

    ref: dict = {}
    for t in ts.gw_tiles:
        im = img(t.tile_id)
        n, e, s_, w = t.edge_colors
        for key, sl in ((("e", e), (hi_u, slice(None))), (("w", w), (lo_u, slice(None))),
                        (("n", n), (slice(None), hi_v)), (("s", s_), (slice(None), lo_v))):
            ref.setdefault(key, (t.tile_id, [L[sl] for L in im]))
    bad = 0
    for t in ts.gw_tiles:
        im = img(t.tile_id)
        n, e, s_, w = t.edge_colors
        # skip the corner zones along the band; they belong to the corner patch and are compared below
        bad += ne([L[hi_u][:, ~(lo_v | hi_v)] for L in im], [L[:, ~(lo_v | hi_v)] for L in ref[("e", e)][1]])
        bad += ne([L[lo_u][:, ~(lo_v | hi_v)] for L in im], [L[:, ~(lo_v | hi_v)] for L in ref[("w", w)][1]])
        bad += ne([L[:, hi_v][~(lo_u | hi_u)] for L in im], [L[~(lo_u | hi_u)] for L in ref[("n", n)][1]])
        bad += ne([L[:, lo_v][~(lo_u | hi_u)] for L in im], [L[~(lo_u | hi_u)] for L in ref[("s", s_)][1]])
    corners = [[L[np.ix_(lo_u | hi_u, lo_v | hi_v)] for L in img(t.tile_id)] for t in ts.gw_tiles]
    for c in corners[1:]:
        bad += ne(c, corners[0])
    U, V = recipe.dims
    e = recipe.entries
    for a in range(U):
        for b in range(V):
            A = img(int(e[a, b]))
            if a + 1 < U:
                B = img(int(e[a + 1, b]))
                bad += ne([L[R - 1:] for L in A], [L[:1] for L in B])
            if b + 1 < V:
                B = img(int(e[a, b + 1]))
                bad += ne([L[:, R - 1:] for L in A], [L[:, :1] for L in B])
    return bad


def check_determinism(rng, trials: int = 1, world: World | None = None, cells=None) -> tuple[bool, str]:
    world = world or small_world(int(rng.integers(2**31)))
    cells = cells or world_sample_cells(world, rng, max(1, trials))
    bad = outside = n = 0
    for c in cells:
        a, _ = populate_cell(c, world)
        b, _ = populate_cell(c, world)
        bad += a.digest() != b.digest()
        _, p, _ = a.records()
        n += len(p)
        outside += int(np.sum(np.any(cell_indices(p, world.grid) != np.asarray(c), axis=1)))
    return bad == 0 and outside == 0, f"{len(cells)} cells, {n} records: {bad} non-identical caches, {outside} outside their cell"


def check_inside(rng, trials: int = 1, n_points: int = 2000) -> tuple[bool, str]:
    bad = total = 0
    for _ in range(max(1, trials)):
        radius = float(rng.uniform(50, 150))
        mesh = demo.geodesic_sphere(2, radius, base="icosahedron", mesh_id="ico")
        cell = radius * 0.6
        dim = 2 * int(np.ceil(1.3 * radius / cell))
        grid = GridSpec((dim,) * 3, (cell,) * 3)
        w = World(grid, [demo.lipid_model()], {"ico": mesh}, [MeshInstance("ico", "p", tuple(rng.uniform(-5, 5, 3)),
                                                                           (0.0, 0.0, 0.0, 1.0))])
        pts = rng.uniform(-1.25 * radius, 1.25 * radius, (n_points, 3))
        from .geometry import point_triangle_distance

        tris = w.geometry[0].tris
        dist = np.min(point_triangle_distance(pts, tris), axis=1)
        pts = pts[dist > 2.0]
        truth = oracles.parity_inside(pts, tris)
        got = inside_labels(pts, w)
        bad += int(np.sum(got != truth))
        total += len(pts)
    return bad == 0, f"{bad} disagreements with ray parity over {total} points"


def inside_labels(points, world: World) -> np.ndarray:
    """Boolean inside mask via the per-cell half-space test."""
    ci = cell_indices(points, world.grid)
    out = np.zeros(len(points), dtype=bool)
    for c in np.unique(ci, axis=0):
        sel = np.all(ci == c, axis=1)
        g = compute_cell_geometry(tuple(int(x) for x in c), world)
        out[sel] = np.asarray(inside_test(points[sel], g, world)) == "inside"
    return out


def small_world(seed: int = 0, radius: float = 900.0, cell: float = 500.0) -> World:
    """Small membrane+soluble scene for determinism checks."""
    from .tiling import build_tileset

    models = [demo.lipid_model(), demo.protein_model(), demo.hemoglobin_model(n_atoms=200)]
    md = {m.model_id: m for m in models}
    ts = build_tileset("env", [demo.membrane_rules(300, 250.0), demo.box_rules(40, 250.0)], seed, md)
    mesh = demo.geodesic_sphere(2, radius, base="octahedron", mesh_id="v")
    dim = 2 * int(np.ceil(radius / cell))
    grid = GridSpec((dim,) * 3, (cell,) * 3)
    return World(grid, models, {"v": mesh}, [MeshInstance("v", "env", (0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 1.0))],
                 {"env": ts}, seed=seed, cache_capacity=10**6)


# ---------------------------------------------------------------- suite


SUITES = {
    "grid": check_grid,
    "bvh": check_bvh,
    "sort-last": check_sortlast,
    "wang": check_wang,
    "determinism": check_determinism,
    "inside": check_inside,
}


def run_suites(seed: int = 0, trials: int = 3, names=None, inject_fault: bool = False, world=None,
               tileset=None) -> list[CheckResult]:
    """Run the oracle suites; ``trials = 0`` runs nothing (vacuous pass)."""
    out = []
    if trials <= 0:
        return out
    for name in names or SUITES:
        rng = np.random.default_rng([seed, len(name)])
        t0 = time.perf_counter()
        kw = {}
        if name == "sort-last":
            kw["inject_fault"] = inject_fault
        if name == "wang" and tileset is not None and tileset.gw_tiles:
            kw["tileset"] = tileset
            if world is not None:
                kw["models"] = {m.model_id: m for m in world.models}
        if name == "determinism" and world is not None:
            kw["world"] = world
            kw["cells"] = world_sample_cells(world, rng, trials)
        try:
            ok, detail = SUITES[name](rng, trials, **kw)
        except Exception as e:  # a crash is a failed property, reported by name
            ok, detail = False, f"error: {type(e).__name__}: {e}"
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return out


def world_sample_cells(world: World, rng, trials: int):
    """Cells crossed by mesh triangles (preferred) plus a few random ones."""
    cells = set()
    for g in world.geometry:
        cen = g.centroids[rng.choice(len(g.centroids), min(len(g.centroids), trials), replace=False)]
        for c in cell_indices(cen, world.grid):
            if world.grid.in_range(c):
                cells.add(tuple(int(x) for x in c))
    for _ in range(trials):
        cells.add(tuple(int(rng.integers(0, d)) for d in world.grid.dim))
    return sorted(cells)

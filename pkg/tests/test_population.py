from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanoscene import demo, oracles
from nanoscene.geometry import point_triangle_distance
from nanoscene.grid import CacheOverflowError, GridSpec, cell_indices
from nanoscene.population import (box_repetition, canonical_records, compute_cell_geometry, half_space,
                                  populate_cell, populate_region_membrane)
from nanoscene.scene import MeshInstance
from nanoscene.tiling import build_tileset
from nanoscene.validate import small_world
from nanoscene.world import World

IDENTITY = (0.0, 0.0, 0.0, 1.0)


@pytest.fixture(scope="module")
def world():
    return small_world(3)


def _membrane_cell(world):
    g = world.geometry[0]
    return tuple(int(x) for x in cell_indices(g.centroids[:1], world.grid)[0])


def test_populate_is_deterministic_across_worlds(world):
    c = _membrane_cell(world)
    a, sa = populate_cell(c, world)
    b, sb = populate_cell(c, small_world(3))
    assert len(a) > 0 and a.digest() == b.digest()
    assert sa == sb
    other, _ = populate_cell(c, small_world(4))
    assert other.digest() != a.digest()


def test_every_instance_in_its_own_cell(world):
    total = 0
    for c in [(i, j, k) for i in range(4) for j in range(4) for k in range(4)]:
        cache, stats = populate_cell(c, world)
        _, p, q = cache.records()
        assert np.all(cell_indices(p, world.grid) == c)
        np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0)
        assert stats.membrane + stats.soluble == len(cache)
        total += len(cache)
    assert total > 0


def test_membrane_on_surface_and_solubles_inside(world):
    c = _membrane_cell(world)
    cache, stats = populate_cell(c, world)
    m, p, _ = cache.records()
    names = np.array([mod.model_id for mod in world.models])[m]
    tris = world.geometry[0].tris
    mem = p[names != "hemoglobin"]
    sol = p[names == "hemoglobin"]
    assert len(mem) == stats.membrane > 0
    d = np.min(point_triangle_distance(mem, tris), axis=1)
    assert np.max(d) < 1e-6 * 900
    if len(sol):
        assert np.all(oracles.parity_inside(sol, tris))


def test_outside_cell_is_empty():
    w = small_world(3, radius=600.0, cell=500.0)
    w = World(GridSpec((6, 6, 6), (500.0,) * 3), w.models, w.meshes, w.instances, w.tilesets, seed=3)
    cache, stats = populate_cell((0, 0, 0), w)
    assert len(cache) == 0 and stats.classification == "outside" and stats.triangles == 0


def test_interior_cell_matches_box_tile_sum():
    models = [demo.hemoglobin_model(n_atoms=30)]
    ts = build_tileset("b", [demo.box_rules(50, 250.0, variants=3)], 2, {m.model_id: m for m in models})
    mesh = demo.geodesic_sphere(3, 3000.0, base="octahedron", mesh_id="s")
    w = World(GridSpec((8, 8, 8), (700.0,) * 3), models, {"s": mesh},
              [MeshInstance("s", "b", (0.0, 0.0, 0.0), IDENTITY)], {"b": ts}, seed=9)
    for c in [(4, 4, 4), (3, 4, 4), (3, 3, 4)]:
        cache, stats = populate_cell(c, w)
        assert stats.classification == "inside"
        assert len(cache) == oracles.box_tile_count(c, w)
    # 700 is not a multiple of 250: the third slot overhangs and is cropped
    full = sum(len(t) for t in ts.box_tiles) * 27 / len(ts.box_tiles)
    assert len(cache) < 0.95 * full


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(1.0, 5000.0)] * 3), st.tuples(*[st.floats(1.0, 5000.0)] * 3))
def test_box_repetition_covers_cell(cell, box):
    rep = np.array(box_repetition(cell, box))
    assert np.all(rep >= 1)
    assert np.all(rep * np.array(box) >= np.array(cell) * (1 - 1e-12))
    assert np.all((rep - 1) * np.array(box) < np.array(cell))


def test_two_by_two_box_repetition():
    assert tuple(box_repetition((2000.0,) * 3, (1000.0,) * 3)) == (2, 2, 2)


def test_half_space_sign():
    tri = np.array([[[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]])
    n = np.array([[0.0, 1.0, 0.0]])
    c = tri.mean(axis=1)
    pts = np.array([[0.2, 1.0, 0.2], [0.2, -1.0, 0.2], [5.0, -0.1, 5.0]])
    inside, nearest = half_space(pts, tri, n, c)
    assert inside.tolist() == [False, True, True] and nearest.tolist() == [0, 0, 0]


@pytest.mark.parametrize("seed, tri", [
    (3, ((-900.0, 10.0, -400.0), (1800.0, 30.0, -300.0), (300.0, -20.0, 700.0))),
    (8, ((-700.0, -300.0, 0.0), (900.0, 200.0, 100.0), (0.0, 100.0, 800.0))),
])
def test_union_of_cells_equals_merged_region(seed, tri):
    models = [demo.lipid_model(), demo.protein_model()]
    ts = build_tileset("m", [demo.membrane_rules(800, 250.0)], seed, {m.model_id: m for m in models})
    mesh = demo.single_triangle_mesh(*tri, uv0=(0.0, 0.0), uv1=(1.0, 0.0), uv2=(0.4, 1.0))
    w = World(GridSpec((2, 1, 1), (1000.0,) * 3), models, {"tri": mesh},
              [MeshInstance("tri", "m", (0.0, 0.0, 0.0), IDENTITY)], {"m": ts}, seed=seed)
    cells = [(0, 0, 0), (1, 0, 0)]
    geoms = [compute_cell_geometry(c, w) for c in cells]
    assert all(len(g) == 1 for g in geoms)  # the triangle crosses both cells
    union = canonical_records([populate_cell(c, w)[0].records() for c in cells])
    merged = populate_region_membrane(cells, w)
    assert len(union[0]) > 0
    for a, b in zip(union, merged):
        assert np.array_equal(a, b)


def test_cache_capacity_overflow(world):
    c = _membrane_cell(world)
    full, _ = populate_cell(c, world)
    w = World(world.grid, world.models, world.meshes, world.instances, world.tilesets, seed=world.seed,
              cache_capacity=10)
    cache, stats = populate_cell(c, w)
    assert len(cache) == 10 and stats.overflow == len(full) - 10
    with pytest.raises(CacheOverflowError):
        populate_cell(c, w, strict=True)

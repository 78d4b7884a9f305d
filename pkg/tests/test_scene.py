from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanoscene import demo
from nanoscene.scene import (Camera, MeshInstance, MolecularModel, ParseError, SceneConfig, SceneError,
                             compute_scene_aabb, load_config, load_mesh, load_molecular_model, load_skeleton,
                             write_mesh, write_molecular_model, write_skeleton)

finite = st.floats(-1e4, 1e4, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite, st.floats(0.1, 10.0)), min_size=1, max_size=20))
def test_xyzr_round_trip(tmp_path_factory, rows):
    data = np.array(rows)
    m = MolecularModel("m", data[:, :3], data[:, 3], (0.1, 0.2, 0.3))
    path = tmp_path_factory.mktemp("xyzr") / "m.xyzr"
    write_molecular_model(m, path)
    assert load_molecular_model(path) == m


@pytest.mark.parametrize("body, line", [
    ("0 0 0 1\n1 2 3\n", 2),
    ("0 0 0 1\n1 2 x 1\n", 2),
    ("0 0 0 -1\n", 1),
    ("# color 1 2\n0 0 0 1\n", 1),
    ("0 0 nan 1\n", 1),
])
def test_xyzr_parse_errors_report_line(tmp_path, body, line):
    p = tmp_path / "bad.xyzr"
    p.write_text(body)
    with pytest.raises(ParseError) as e:
        load_molecular_model(p)
    assert e.value.line_no == line


def test_xyzr_empty_model_rejected(tmp_path):
    p = tmp_path / "e.xyzr"
    p.write_text("# nothing\n")
    with pytest.raises(SceneError):
        load_molecular_model(p)


def test_bounding_radius():
    m = MolecularModel("m", [[3.0, 4.0, 0.0], [0.0, 0.0, 0.0]], [1.0, 2.0])
    assert m.bounding_radius == 6.0
    assert len(m.atoms) == 2


def test_obj_round_trip_and_fanning(tmp_path):
    mesh = demo.geodesic_sphere(1, 10.0, mesh_id="s")
    p = tmp_path / "s.obj"
    write_mesh(mesh, p)
    assert load_mesh(p) == mesh
    quad = tmp_path / "q.obj"
    quad.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\nf 1/1 2/2 3/3 4/4\n")
    q = load_mesh(quad)
    assert len(q) == 2 and q.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


@pytest.mark.parametrize("body", [
    "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n",  # no uvs: parameterization is not done here
    "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 2 0\nvt 0 1\nf 1/1 2/2 3/3\n",  # uv outside [0,1]
    "v 0 0 0\nv 1 0 0\nv 2 0 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 3/3\n",  # degenerate
    "v 0 0 0\nvt 0 0\nf 1/1 2/1 3/1\n",  # index out of range
])
def test_obj_rejects_bad_meshes(tmp_path, body):
    p = tmp_path / "bad.obj"
    p.write_text(body)
    with pytest.raises(SceneError):
        load_mesh(p)


def test_mesh_t_big_and_normals():
    mesh = demo.single_triangle_mesh((0, 0, 0), (0, 0, 2), (2, 0, 0))
    assert mesh.t_big == 0
    np.testing.assert_allclose(mesh.normals[0], (0, 1, 0))


def test_sphere_winding_is_outward():
    for base in ("icosahedron", "octahedron"):
        mesh = demo.geodesic_sphere(2, 5.0, base=base)
        cen = mesh.tri_positions.mean(axis=1)
        assert np.all(np.einsum("ij,ij->i", mesh.normals, cen) > 0)


def test_skeleton_round_trip_and_validation(tmp_path):
    insts = [MeshInstance("a", "p", (1.0, 2.0, 3.0), (0.0, 0.0, 0.0, 1.0)),
             MeshInstance("b", "q", (0.0, 0.0, 0.0), (0.0, 0.6, 0.0, 0.8))]
    p = tmp_path / "s.json"
    write_skeleton(insts, p)
    assert load_skeleton(p) == insts
    with pytest.raises(SceneError, match="unknown mesh_id"):
        load_skeleton(p, mesh_ids={"a"})
    with pytest.raises(SceneError, match="unknown patch_id"):
        load_skeleton(p, patch_ids={"p"})
    p.write_text(json.dumps([{"mesh_id": "a", "patch_id": "p", "position": [0, 0, 0], "rotation": [0, 0, 1, 1]}]))
    with pytest.raises(SceneError, match="normalized"):
        load_skeleton(p)


def test_scene_aabb():
    mesh = demo.quad_mesh(2.0, 4.0, "q")
    insts = [MeshInstance("q", "p", (10.0, 0.0, 0.0), (0.0, 0.0, 0.0, 1.0)),
             MeshInstance("q", "p", (-10.0, 5.0, 0.0), (0.0, 0.0, 0.0, 1.0))]
    lo, hi = compute_scene_aabb(insts, {"q": mesh})
    np.testing.assert_allclose(lo, (-11, 0, -2))
    np.testing.assert_allclose(hi, (11, 5, 2))
    with pytest.raises(SceneError):
        compute_scene_aabb([], {})


def test_camera_rays_centre_and_orthonormal_basis():
    cam = Camera((0.0, 0.0, 0.0), (0.0, 0.0, -5.0), (0.0, 1.0, 0.0), 90.0, 3, 3)
    o, d = cam.rays()
    assert o.shape == d.shape == (9, 3)
    np.testing.assert_allclose(d[4], (0, 0, -1), atol=1e-15)
    assert d[0, 1] > 0 and d[0, 0] < 0  # top-left pixel looks up and left
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    f, r, u = cam.basis()
    np.testing.assert_allclose([f @ r, f @ u, r @ u], 0.0, atol=1e-15)


@pytest.mark.parametrize("kw", [dict(vertical_fov=0.0), dict(width=0), dict(look_at=(0.0, 0.0, 0.0)),
                                dict(up=(0.0, 0.0, 1.0))])
def test_camera_rejects_bad_input(kw):
    base = dict(position=(0.0, 0.0, 0.0), look_at=(0.0, 0.0, 1.0), up=(0.0, 1.0, 0.0))
    base.update(kw)
    with pytest.raises(SceneError):
        Camera(**base)


def test_camera_dict_round_trip():
    cam = Camera((1.0, 2.0, 3.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 45.0, 32, 16)
    assert Camera.from_dict(cam.to_dict()) == cam


def test_config_defaults_and_errors(tmp_path):
    cfg = SceneConfig()
    assert cfg.grid_dim == (200, 200, 200) and cfg.cell_size == (2000.0,) * 3
    assert cfg.cache_capacity == 1_000_000 and cfg.window_radius == 1
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"cell_size": 500, "seed": 4}))
    cfg = load_config(p)
    assert cfg.cell_size == (500.0,) * 3 and cfg.seed == 4 and cfg.base_dir == tmp_path
    assert cfg.asset_path("a/b") == tmp_path / "a" / "b"
    p.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SceneError, match="unknown config keys"):
        load_config(p)
    for bad in ({"grid_dim": [0, 1, 1]}, {"cell_size": -1}, {"window_radius": -1}, {"cache_capacity": 0}):
        with pytest.raises(SceneError):
            SceneConfig.from_dict(bad)

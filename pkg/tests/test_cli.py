from __future__ import annotations

import json

import numpy as np
import pytest

from nanoscene import cli
from nanoscene.demo import write_virion_scene
from nanoscene.render import read_gbuffer, read_ppm


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    write_virion_scene(d, radius=1200.0, subdiv=2, cell=600.0, membrane_count=400, tile=250.0, box_count=60,
                       box=300.0, frames=3, width=32, height=24, ao_rays=2, atlas_resolution=16)
    assert cli.main(["bake", "--config", str(d / "scene.json"), "--summary", str(d / "bake.json")]) == 0
    return d


def test_bake_writes_tiles_and_atlas(scene):
    info = json.loads((scene / "bake.json").read_text())["envelope"]
    assert info["gw_tiles"] == 16 and info["box_tiles"] >= 1
    assert 0.9 * 400 <= info["tileL_max"] <= 400
    assert (scene / "baked" / "envelope.tiles").exists()
    assert (scene / "baked" / "envelope.atlas.json").exists()


def test_bake_with_explicit_rules_and_out(scene, tmp_path, capsys):
    rc = cli.main(["bake", "--config", str(scene / "scene.json"), "--rules",
                   str(scene / "assets" / "box.rules.json"), "--patch", "cyto", "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "cyto.tiles").exists()
    # a patch without surface rules has nothing to bake into an atlas
    assert not (tmp_path / "cyto.atlas.json").exists()
    assert "cyto: 0 GW tiles" in capsys.readouterr().out


def test_render_is_reproducible(scene, tmp_path):
    args = ["render", "--config", str(scene / "scene.json"), "--camera", str(scene / "camera_path.json")]
    assert cli.main(args + ["--out", str(tmp_path / "a"), "--gbuffer"]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b"), "--frames", "2"]) == 0
    ra = json.loads((tmp_path / "a" / "report.json").read_text())
    rb = json.loads((tmp_path / "b" / "report.json").read_text())
    assert len(ra["frames"]) == 3 and len(rb["frames"]) == 2
    assert [f["hash"] for f in ra["frames"][:2]] == [f["hash"] for f in rb["frames"]]
    assert (ra["width"], ra["height"], ra["ao_rays"]) == (32, 24, 2)
    img = read_ppm(tmp_path / "a" / "frame_0001.ppm")
    assert img.shape == (24, 32, 3)
    assert np.array_equal(img, read_ppm(tmp_path / "b" / "frame_0001.ppm"))
    g = read_gbuffer(tmp_path / "a" / "frame_0001.gbuf", 32, 24)
    assert g.shape == (24, 32)
    assert not list((tmp_path / "a").glob("*.part"))


def test_render_options(scene, tmp_path):
    rc = cli.main(["render", "--config", str(scene / "scene.json"), "--camera", str(scene / "camera_path.json"),
                   "--out", str(tmp_path), "--frames", "1", "--size", "16x8", "--ao-rays", "0", "--single-structure"])
    assert rc == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["single_structure"] and rep["ao_rays"] == 0 and (rep["width"], rep["height"]) == (16, 8)
    assert read_ppm(tmp_path / "frame_0000.ppm").shape == (8, 16, 3)


def test_render_without_bake_is_a_usage_error(tmp_path):
    write_virion_scene(tmp_path, radius=600.0, subdiv=1, cell=600.0, frames=1)
    rc = cli.main(["render", "--config", str(tmp_path / "scene.json"), "--camera",
                   str(tmp_path / "camera_path.json"), "--out", str(tmp_path / "o")])
    assert rc == 2


def test_populate_prints_stats_and_dumps(scene, tmp_path, capsys):
    cfg = json.loads((scene / "scene.json").read_text())
    half = cfg["grid_dim"][0] // 2
    cell = f"{half + 1},{half},{half}"  # touches the membrane at x = 1200
    dump = tmp_path / "cell.bin"
    assert cli.main(["populate", "--config", str(scene / "scene.json"), "--cell", cell, "--dump", str(dump)]) == 0
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert info["cell"] == [half + 1, half, half] and info["classification"] == "intersected"
    assert info["membrane"] > 0 and info["overflow"] == 0
    assert dump.stat().st_size == (info["membrane"] + info["soluble"]) * (4 + 24 + 32)
    assert cli.main(["populate", "--config", str(scene / "scene.json"), "--cell", "999,0,0"]) == 2
    assert cli.main(["populate", "--config", str(scene / "scene.json"), "--cell", "1,2"]) == 2


def test_validate_exit_codes(scene, capsys):
    assert cli.main(["validate", "--trials", "1", "--suites", "grid", "bvh"]) == 0
    assert cli.main(["validate", "--trials", "1", "--suites", "sort-last", "--inject-fault"]) == 1
    assert "first failing property: sort-last" in capsys.readouterr().out
    assert cli.main(["validate", "--trials", "0"]) == 0
    assert "vacuous pass" in capsys.readouterr().out
    assert cli.main(["validate", "--suites", "nope"]) == 2
    assert cli.main(["validate", "--config", str(scene / "scene.json"), "--trials", "1",
                     "--suites", "determinism", "wang"]) == 0


def test_usage_errors(tmp_path):
    assert cli.main([]) == 2
    assert cli.main(["--help"]) == 0
    assert cli.main(["render", "--config", str(tmp_path / "missing.json"), "--camera", "x", "--out", "y"]) == 2
    assert cli.main(["render", "--size", "12"]) == 2


def test_demo_writes_scene(tmp_path):
    assert cli.main(["demo", "--out", str(tmp_path), "--frames", "2", "--size", "20x10"]) == 0
    cfg = json.loads((tmp_path / "scene.json").read_text())
    assert (cfg["render"]["width"], cfg["render"]["height"]) == (20, 10)
    assert len(json.loads((tmp_path / "camera_path.json").read_text())) == 2
    for p in cfg["assets"]["models"].values():
        assert (tmp_path / p).exists()

"""``nanoscene bake|render|populate|validate|demo``.

Exit codes: 0 ok, 1 validation failure, 2 usage, IO or scene error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import _kernels
from .grid import GridError, cell_index
from .scene import Camera, SceneConfig, SceneError, load_config, load_molecular_model
from .tiling import TilingError, build_tileset, load_rules, write_tileset

log = logging.getLogger("nanoscene")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("image size must be positive")
    return w, h


def _cell(text: str) -> tuple[int, int, int]:
    try:
        c = tuple(int(x) for x in text.replace(" ", "").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected i,j,k, got {text!r}") from None
    if len(c) != 3:
        raise argparse.ArgumentTypeError(f"expected i,j,k, got {text!r}")
    return c


def _load(args) -> SceneConfig:
    if not args.config:
        raise UsageError("--config is required")
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "window_radius", None) is not None:
        if args.window_radius < 0:
            raise UsageError("--window-radius must be >= 0")
        cfg.window_radius = args.window_radius
    return cfg


def _models(cfg: SceneConfig) -> dict:
    spec = cfg.assets.get("models", {})
    items = spec.items() if isinstance(spec, dict) else [(None, p) for p in spec]
    out = {}
    for mid, p in items:
        m = load_molecular_model(cfg.asset_path(p), mid)
        out[m.model_id] = m
    return out


def _world(cfg: SceneConfig):
    from .world import World

    for pid, p in cfg.assets.get("tilesets", {}).items():
        if not cfg.asset_path(p).exists():
            raise UsageError(f"tile set {pid!r} not found at {cfg.asset_path(p)}; run `nanoscene bake` first")
    return World.from_config(cfg)


def _params(cfg: SceneConfig, args=None):
    from .render import ShadingParams

    r = dict(cfg.render)
    r.setdefault("seed", cfg.seed)
    if args is not None and getattr(args, "ao_rays", None) is not None:
        r["ao_rays"] = args.ao_rays
    if args is not None and getattr(args, "atlas_resolution", None) is not None:
        r["atlas_resolution"] = args.atlas_resolution
    return ShadingParams.from_dict(r)


# ---------------------------------------------------------------- commands


def cmd_bake(args) -> int:
    from .render import bake_texture_atlas, write_atlas

    cfg = _load(args)
    models = _models(cfg)
    if args.rules:
        rules_by_patch = {args.patch: list(args.rules)}
    else:
        rules_by_patch = {pid: ([r] if isinstance(r, str) else list(r)) for pid, r in cfg.assets.get("rules", {}).items()}
    if not rules_by_patch:
        raise UsageError("no rules: pass --rules or list assets.rules in the config")
    params = _params(cfg, args)
    summary = {}
    for pid, paths in sorted(rules_by_patch.items()):
        rules = [load_rules(cfg.asset_path(p) if not Path(p).is_absolute() and not args.rules else Path(p))
                 for p in paths]
        t0 = time.perf_counter()
        ts = build_tileset(pid, rules, cfg.seed, models)
        t1 = time.perf_counter()
        if args.out:
            ts_path = Path(args.out) / f"{pid}.tiles"
            atlas_path = Path(args.out) / f"{pid}.atlas"
        else:
            ts_path = cfg.asset_path(cfg.assets.get("tilesets", {}).get(pid, f"baked/{pid}.tiles"))
            atlas_path = cfg.asset_path(cfg.assets.get("atlases", {}).get(pid, f"baked/{pid}.atlas"))
        ts_path.parent.mkdir(parents=True, exist_ok=True)
        write_tileset(ts, ts_path)
        atlas = bake_texture_atlas(ts, models, params) if ts.gw_tiles else None
        if atlas is not None:
            write_atlas(atlas, atlas_path)
        t2 = time.perf_counter()
        info = {
            "gw_tiles": len(ts.gw_tiles),
            "box_tiles": len(ts.box_tiles),
            "tileL_max": ts.tileL_max,
            "tileB_max": ts.tileB_max,
            "gw_density": (ts.tileL_max / float(np.prod(ts.gw_world_size))) if ts.gw_tiles else 0.0,
            "box_density": (ts.tileB_max / float(np.prod(ts.box_world_size))) if ts.box_tiles else 0.0,
            "tileset": str(ts_path),
            "atlas": str(atlas_path) if atlas is not None else None,
            "generate_s": round(t1 - t0, 3),
            "bake_s": round(t2 - t1, 3),
        }
        summary[pid] = info
        print(f"{pid}: {info['gw_tiles']} GW tiles (tileL_max {info['tileL_max']}, "
              f"{info['gw_density']:.6g}/A^2), {info['box_tiles']} box tiles (tileB_max {info['tileB_max']}, "
              f"{info['box_density']:.6g}/A^3)")
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary, indent=1))
    return EXIT_OK


def _camera_path(path, size, grid) -> list[Camera]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read camera path {path}: {e}") from None
    if isinstance(data, dict):
        data = data.get("keyframes", [])
    if not data:
        raise UsageError("camera path is empty")
    cams = []
    for n, d in enumerate(data):
        try:
            cam = Camera.from_dict(d, *size)
            cell_index(cam.position, grid)
        except (KeyError, TypeError, SceneError, GridError) as e:
            raise UsageError(f"camera keyframe {n}: {e}") from None
        cams.append(cam)
    return cams


def cmd_render(args) -> int:
    from .render import load_atlas, write_gbuffer, write_ppm
    from .session import Session

    cfg = _load(args)
    world = _world(cfg)
    params = _params(cfg, args)
    r = cfg.render
    size = args.size or (int(r.get("width", 256)), int(r.get("height", 256)))
    gbuffer = args.gbuffer or bool(r.get("gbuffer", False))
    single = args.single_structure or bool(r.get("single_structure", False))
    cams = _camera_path(args.camera, size, world.grid)
    if args.frames is not None:
        cams = cams[: args.frames]
    atlases = {}
    for pid, p in cfg.assets.get("atlases", {}).items():
        if Path(f"{cfg.asset_path(p)}.json").exists():
            atlases[pid] = load_atlas(cfg.asset_path(p))
        else:
            log.warning("atlas %s not found; patch %r renders with its base color", cfg.asset_path(p), pid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    session = Session(world, params, atlases, single_structure=single, strict=args.strict)
    frames = []
    for n, cam in enumerate(cams):
        res, rep = session.render(cam)
        target = out / f"frame_{n:04d}.ppm"
        tmp = target.with_suffix(".ppm.part")
        try:
            write_ppm(res.rgb8, tmp)
            tmp.replace(target)
            if gbuffer:
                write_gbuffer(res.records, out / f"frame_{n:04d}.gbuf")
        except OSError:
            tmp.unlink(missing_ok=True)
            raise
        d = rep.to_dict()
        frames.append(d)
        print(f"frame {n}: +{d['activated']} -{d['deactivated']} cells, {d['active_instances']} instances "
              f"(max/cell {d['max_cell_instances']}), {sum(d['timings'].values()):.0f} ms, {d['hash'][:12]}")
    report = {
        "frames": frames,
        "width": size[0],
        "height": size[1],
        "single_structure": single,
        "ao_rays": params.ao_rays,
        "window_radius": world.window_radius,
        "cache_capacity": world.cache_capacity,
        "seed": cfg.seed,
    }
    (out / "report.json").write_text(json.dumps(report, indent=1))
    return EXIT_OK


def cmd_populate(args) -> int:
    from .population import populate_cell

    cfg = _load(args)
    world = _world(cfg)
    cell = args.cell
    if not world.grid.in_range(cell):
        raise UsageError(f"cell {cell} outside the grid {world.grid.dim}")
    cache, stats = populate_cell(cell, world, strict=args.strict)
    info = {
        "cell": list(cell),
        "membrane": stats.membrane,
        "soluble": stats.soluble,
        "triangles": stats.triangles,
        "classification": stats.classification,
        "overflow": stats.overflow,
        "digest": cache.digest().hex(),
    }
    print(json.dumps(info))
    if args.dump:
        m, p, q = cache.records()
        rec = np.empty(len(m), dtype=[("model", "<u4"), ("pos", "<f8", 3), ("rot", "<f8", 4)])
        rec["model"], rec["pos"], rec["rot"] = m, p, q
        Path(args.dump).write_bytes(rec.tobytes())
    return EXIT_OK


def cmd_validate(args) -> int:
    from .validate import SUITES, run_suites

    if args.trials == 0:
        print("warning: trials = 0, nothing checked (vacuous pass)")
        return EXIT_OK
    world = tileset = None
    if args.config:
        cfg = _load(args)
        world = _world(cfg)
        tileset = next(iter(world.tilesets.values()), None)
        seed = cfg.seed if args.seed is None else args.seed
    else:
        seed = args.seed or 0
    names = args.suites or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise UsageError(f"unknown suites {unknown}; choose from {list(SUITES)}")
    results = run_suites(seed, args.trials, names, args.inject_fault, world, tileset)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"first failing property: {failed[0].name}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_demo(args) -> int:
    from .demo import write_virion_scene

    w, h = args.size or (256, 256)
    out = write_virion_scene(args.out, frames=args.frames, width=w, height=h, seed=args.seed or 7)
    print(f"scene written to {out}; next: nanoscene bake --config {out}/scene.json")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nanoscene", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="scene config JSON")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--window-radius", type=int, help="activation window radius in cells")

    b = sub.add_parser("bake", help="generate tile sets and bake impostor atlases")
    common(b)
    b.add_argument("--rules", nargs="+", help="rule files for one patch (default: assets.rules)")
    b.add_argument("--patch", default="default", help="patch id for --rules")
    b.add_argument("--out", help="output directory (default: paths in assets.tilesets/atlases)")
    b.add_argument("--atlas-resolution", type=int, help="texels per tile side")
    b.add_argument("--summary", help="write the bake summary as JSON")
    b.set_defaults(func=cmd_bake)

    r = sub.add_parser("render", help="render a camera path")
    common(r)
    r.add_argument("--camera", required=True, help="camera path JSON (list of keyframes)")
    r.add_argument("--out", required=True, help="output directory for frames and report.json")
    r.add_argument("--size", type=_size, help="image size WxH")
    r.add_argument("--ao-rays", type=int, help="ambient occlusion rays per pixel (0 disables)")
    r.add_argument("--gbuffer", action="store_true", help="also dump per-frame G-buffers")
    r.add_argument("--single-structure", action="store_true", help="trace one merged TLAS instead of per-cell ones")
    r.add_argument("--frames", type=int, help="render only the first N keyframes")
    r.add_argument("--strict", action="store_true", help="fail when a cell exceeds the cache capacity")
    r.set_defaults(func=cmd_render)

    q = sub.add_parser("populate", help="populate one cell and print its statistics")
    common(q)
    q.add_argument("--cell", type=_cell, required=True, help="cell id i,j,k")
    q.add_argument("--dump", help="write the cache records (u32 model, 3 f64 pos, 4 f64 rot)")
    q.add_argument("--strict", action="store_true")
    q.set_defaults(func=cmd_populate)

    v = sub.add_parser("validate", help="run the oracle suites")
    common(v, config_required=False)
    v.add_argument("--trials", type=int, default=3)
    v.add_argument("--suites", nargs="+", help="subset of suites to run")
    v.add_argument("--inject-fault", action="store_true", help="corrupt one pass-1 buffer pixel (self-test)")
    v.set_defaults(func=cmd_validate)

    d = sub.add_parser("demo", help="write a synthetic virion scene with a fly-through camera path")
    d.add_argument("--out", required=True)
    d.add_argument("--frames", type=int, default=10)
    d.add_argument("--size", type=_size)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _kernels.configure_threads()
    try:
        return args.func(args)
    except (UsageError, SceneError, GridError, TilingError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

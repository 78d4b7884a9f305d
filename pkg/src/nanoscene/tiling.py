"""Tile sets for procedural population and the per-mesh tile recipe.

Rectangular (GW) tiles form a complete Wang set with two colors per edge
axis. Seams are consistent by construction: every (axis, color) pair owns one
band of instances straddling the edge, all corners share one universal patch,
and each tile copies its halves of those bands before its interior is filled
by dart throwing. Tile coordinates are multiples of ``2**-24`` so that they
survive float32 storage and shifting by whole tiles exactly.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._dart import throw_darts
from .geometry import hash64, quat_about_axis, quat_normalize, string_key

QUANT = float(1 << 24)
N_COLORS = 2
RECORD = np.dtype([("model", "<u4"), ("pos", "<f4", 3), ("rot", "<f4", 4)])


class TilingError(ValueError):
    pass


def _quantize_up(x: float) -> float:
    return math.ceil(x * QUANT) / QUANT


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def tile_id_for(colors) -> int:
    """Index of the tile with edge colors ``(north, east, south, west)`` in the complete set."""
    n, e, s, w = colors
    return ((n * N_COLORS + e) * N_COLORS + s) * N_COLORS + w


def colors_for(tile_id: int) -> tuple[int, int, int, int]:
    w = tile_id % N_COLORS
    s = tile_id // N_COLORS % N_COLORS
    e = tile_id // N_COLORS**2 % N_COLORS
    n = tile_id // N_COLORS**3 % N_COLORS
    return n, e, s, w


# ---------------------------------------------------------------- types


@dataclass(frozen=True)
class TileInstance:
    model_id: int
    coords: tuple
    rotation: tuple


@dataclass(eq=False)
class GWTile:
    tile_id: int
    edge_colors: tuple[int, int, int, int]  # north, east, south, west
    model_ids: np.ndarray  # (n,) indices into the owning set's model list
    coords: np.ndarray  # (n, 2) tile uv in [0, 1)
    rotations: np.ndarray  # (n, 4)
    world_size: tuple[float, float]

    def __len__(self) -> int:
        return len(self.model_ids)

    @property
    def instances(self) -> list[TileInstance]:
        return [
            TileInstance(int(m), tuple(c), tuple(r))
            for m, c, r in zip(self.model_ids, self.coords.tolist(), self.rotations.tolist())
        ]

    @property
    def north(self):
        return self.edge_colors[0]

    @property
    def east(self):
        return self.edge_colors[1]

    @property
    def south(self):
        return self.edge_colors[2]

    @property
    def west(self):
        return self.edge_colors[3]


@dataclass(eq=False)
class BoxTile:
    tile_id: int
    model_ids: np.ndarray
    coords: np.ndarray  # (n, 3) in [0, 1)
    rotations: np.ndarray
    world_size: tuple[float, float, float]

    def __len__(self) -> int:
        return len(self.model_ids)

    @property
    def instances(self) -> list[TileInstance]:
        return [
            TileInstance(int(m), tuple(c), tuple(r))
            for m, c, r in zip(self.model_ids, self.coords.tolist(), self.rotations.tolist())
        ]


@dataclass(eq=False)
class TileSet:
    set_id: str
    models: list[str]
    gw_tiles: list[GWTile] = field(default_factory=list)
    box_tiles: list[BoxTile] = field(default_factory=list)
    strip_width: float = 0.0
    base_color: tuple[float, float, float] = (0.8, 0.7, 0.5)

    @property
    def tileL_max(self) -> int:
        return max((len(t) for t in self.gw_tiles), default=0)

    @property
    def tileB_max(self) -> int:
        return max((len(t) for t in self.box_tiles), default=0)

    @property
    def gw_world_size(self):
        return self.gw_tiles[0].world_size if self.gw_tiles else None

    @property
    def box_world_size(self):
        return self.box_tiles[0].world_size if self.box_tiles else None

    def strip_halfwidth(self) -> tuple[float, float]:
        """Strip width in tile units per axis, as used by the construction."""
        W, H = self.gw_world_size
        return _quantize_up(self.strip_width / W), _quantize_up(self.strip_width / H)


@dataclass
class Rules:
    models: list[tuple[str, float]]
    density: float
    tile_world_size: tuple[float, ...]
    strip_width: float | None = None
    variants: int = 1
    tolerance: float = 0.1
    max_attempts: int = 64
    base_color: tuple[float, float, float] = (0.8, 0.7, 0.5)

    def __post_init__(self):
        self.tile_world_size = tuple(float(x) for x in self.tile_world_size)
        if len(self.tile_world_size) not in (2, 3) or min(self.tile_world_size) <= 0:
            raise TilingError("tile_world_size needs 2 (rectangle) or 3 (box) positive extents")
        if self.density < 0:
            raise TilingError("density must be >= 0")
        if not self.models and self.density > 0:
            raise TilingError("rules with positive density need at least one model")
        if any(w < 0 for _, w in self.models) or (self.models and sum(w for _, w in self.models) <= 0):
            raise TilingError("model weights must be non-negative with a positive sum")
        if self.variants < 1:
            raise TilingError("variants must be >= 1")

    @property
    def is_box(self) -> bool:
        return len(self.tile_world_size) == 3

    @classmethod
    def from_dict(cls, d):
        try:
            models = [(str(m["model_id"]), float(m.get("weight", 1.0))) for m in d.get("models", [])]
            return cls(
                models=models,
                density=float(d["density"]),
                tile_world_size=tuple(d["tile_world_size"]),
                strip_width=None if d.get("strip_width") is None else float(d["strip_width"]),
                variants=int(d.get("variants", 1)),
                tolerance=float(d.get("tolerance", 0.1)),
                max_attempts=int(d.get("max_attempts", 64)),
                base_color=tuple(d.get("base_color", (0.8, 0.7, 0.5))),
            )
        except (KeyError, TypeError) as exc:
            raise TilingError(f"malformed rules: {exc}") from None

    def to_dict(self):
        return {
            "models": [{"model_id": m, "weight": w} for m, w in self.models],
            "density": self.density,
            "tile_world_size": list(self.tile_world_size),
            "strip_width": self.strip_width,
            "variants": self.variants,
            "tolerance": self.tolerance,
            "max_attempts": self.max_attempts,
            "base_color": list(self.base_color),
        }


def load_rules(path) -> Rules:
    try:
        return Rules.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise TilingError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- generation


def _model_tables(rules: Rules, radii: dict):
    try:
        r = np.array([float(radii[m]) for m, _ in rules.models])
    except KeyError as exc:
        raise TilingError(f"rules reference unknown model {exc}") from None
    w = np.cumsum([wt for _, wt in rules.models]).astype(np.float64)
    return r, w


def _throw(lo, hi, scale, fixed_pos, fixed_rad, target, radii, cumw, seed, attempts, periodic=False):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    lo_q = np.round(lo * QUANT).astype(np.int64)
    span_q = np.maximum(np.round((hi - lo) * QUANT).astype(np.int64), 0)
    fixed_pos = np.ascontiguousarray(np.asarray(fixed_pos, dtype=np.float64).reshape(-1, 3))
    fixed_rad = np.ascontiguousarray(np.asarray(fixed_rad, dtype=np.float64).reshape(-1))
    if target <= 0 or len(radii) == 0:
        return np.empty((0, 3)), np.empty(0, np.int32)
    return throw_darts(
        lo_q, span_q, QUANT, np.asarray(scale, dtype=np.float64), fixed_pos, fixed_rad,
        int(target), radii, cumw, np.uint32(seed & 0xFFFFFFFF), int(attempts), periodic,
    )


class _Patch:
    """Instances of one construction region: coords (n,3) in tile units, models, radii, rotations."""

    def __init__(self, pos=None, model=None, radii=None, rot=None):
        self.pos = np.empty((0, 3)) if pos is None else np.asarray(pos)
        self.model = np.empty(0, np.int32) if model is None else np.asarray(model, dtype=np.int32)
        self.rad = np.empty(0) if radii is None else np.asarray(radii)[self.model]
        self.rot = np.empty((0, 4)) if rot is None else np.asarray(rot)

    def shifted(self, du=0.0, dv=0.0):
        out = _Patch()
        out.pos = self.pos + np.array([du, 0.0, dv])
        out.model, out.rad, out.rot = self.model, self.rad, self.rot
        return out

    def select(self, mask):
        out = _Patch()
        out.pos, out.model, out.rad, out.rot = self.pos[mask], self.model[mask], self.rad[mask], self.rot[mask]
        return out

    def __len__(self):
        return len(self.model)

    @staticmethod
    def cat(patches):
        out = _Patch()
        patches = [p for p in patches if len(p.model)]
        if patches:
            out.pos = np.concatenate([p.pos for p in patches])
            out.model = np.concatenate([p.model for p in patches])
            out.rad = np.concatenate([p.rad for p in patches])
            out.rot = np.concatenate([p.rot for p in patches])
        return out


def _membrane_rotations(n, rng):
    """Random spins about +y, the membrane normal in tile space."""
    ang = rng.uniform(0.0, 2.0 * np.pi, n)
    q = quat_about_axis(np.array([0.0, 1.0, 0.0]), ang).reshape(n, 4)
    return _f32(q)


def _box_rotations(n, rng):
    # Shoemake's uniform random quaternions
    u1, u2, u3 = rng.random((3, n))
    q = np.stack(
        [
            np.sqrt(1 - u1) * np.sin(2 * np.pi * u2),
            np.sqrt(1 - u1) * np.cos(2 * np.pi * u2),
            np.sqrt(u1) * np.sin(2 * np.pi * u3),
            np.sqrt(u1) * np.cos(2 * np.pi * u3),
        ],
        axis=1,
    )
    return _f32(quat_normalize(q)) if n else np.empty((0, 4))


class GWConstruction:
    """The shared pieces of a GW set: corner patch and per-color bands.

    Kept after generation so the bake can render strips in their own frames.
    """

    def __init__(self, rules: Rules, seed: int, radii: dict):
        self.rules = rules
        W, H = rules.tile_world_size
        self.world_size = (W, H)
        r, cumw = _model_tables(rules, radii) if rules.models else (np.empty(0), np.ones(1))
        self.radii, self.cumw = r, cumw
        dmax = 2.0 * float(r.max()) if len(r) else 0.0
        w = rules.strip_width if rules.strip_width is not None else dmax
        if w < dmax - 1e-12:
            raise TilingError(f"strip width {w} is below the largest bounding diameter {dmax}")
        self.strip_width = w
        hu = _quantize_up(w / W)
        hv = _quantize_up(w / H)
        if 4 * hu > 1 or 4 * hv > 1:
            raise TilingError(f"strip width {w} too large for a {W}x{H} tile (needs <= quarter extent)")
        self.hu, self.hv = hu, hv
        self.scale = np.array([W, 1.0, H])
        self._seed = hash64(seed, string_key("gw"))
        self.corner = self._throw((-2 * hu, 0.0, -2 * hv), (2 * hu, 0.0, 2 * hv), _Patch(), 1)
        # vertical bands straddle u = 0 between the corner patches at v = 0 and v = 1
        obst_v = _Patch.cat([self.corner, self.corner.shifted(dv=1.0)])
        self.vbands = [self._throw((-hu, 0.0, 2 * hv), (hu, 0.0, 1 - 2 * hv), obst_v, 10 + c) for c in range(N_COLORS)]
        obst_h = _Patch.cat([self.corner, self.corner.shifted(du=1.0)])
        self.hbands = [self._throw((2 * hu, 0.0, -hv), (1 - 2 * hu, 0.0, hv), obst_h, 20 + c) for c in range(N_COLORS)]

    def _throw(self, lo, hi, fixed, salt, count=None):
        W, H = self.world_size
        if count is None:
            count = int(round(self.rules.density * (hi[0] - lo[0]) * W * (hi[2] - lo[2]) * H))
        seed = hash64(self._seed, salt)
        pos, model = _throw(lo, hi, self.scale, fixed.pos, fixed.rad, count, self.radii, self.cumw,
                            seed, self.rules.max_attempts)
        rot = _membrane_rotations(len(model), np.random.default_rng(hash64(seed, 1)))
        return _Patch(pos, model, self.radii, rot)

    def neighbourhood(self, colors):
        """Everything within strip reach of a tile: full bands and the four corner patches."""
        n, e, s, w = colors
        parts = [self.corner.shifted(du, dv) for du in (0.0, 1.0) for dv in (0.0, 1.0)]
        parts += [self.vbands[w], self.vbands[e].shifted(du=1.0), self.hbands[s], self.hbands[n].shifted(dv=1.0)]
        return _Patch.cat(parts)

    def shared_parts(self, colors):
        """Band halves and corner quadrants that fall inside a tile with these edge colors."""
        allp = self.neighbourhood(colors)
        u, v = allp.pos[:, 0], allp.pos[:, 2]
        return allp.select((u >= 0) & (u < 1) & (v >= 0) & (v < 1))

    def make_tile(self, tile_id) -> tuple[_Patch, int]:
        W, H = self.world_size
        hu, hv = self.hu, self.hv
        colors = colors_for(tile_id)
        target = int(round(self.rules.density * W * H))
        shared = self.shared_parts(colors)
        need = target - len(shared)
        # interior [h, 1-h)^2 minus the corner squares, as a cross of three boxes
        pieces = [
            ((hu, 0.0, 2 * hv), (1 - hu, 0.0, 1 - 2 * hv)),
            ((2 * hu, 0.0, hv), (1 - 2 * hu, 0.0, 2 * hv)),
            ((2 * hu, 0.0, 1 - 2 * hv), (1 - 2 * hu, 0.0, 1 - hv)),
        ]
        areas = np.array([(b[0] - a[0]) * (b[2] - a[2]) for a, b in pieces])
        out = [shared]
        placed = self.neighbourhood(colors)
        if need > 0 and areas.sum() > 0:
            counts = np.floor(need * areas / areas.sum()).astype(int)
            counts[0] += need - counts.sum()
            for k, ((lo, hi), n) in enumerate(zip(pieces, counts)):
                p = self._throw(lo, hi, placed, 1000 + 16 * tile_id + k, int(n))
                out.append(p)
                placed = _Patch.cat([placed, p])
        return _Patch.cat(out), target


def generate_gw_tileset(rules: Rules, seed: int, radii: dict, construction: GWConstruction | None = None) -> list[GWTile]:
    """Complete 16-tile Wang set; deterministic in ``(rules, seed)``.

    ``radii`` maps model ids to collision radii (bounding-sphere radii).
    """
    if rules.is_box:
        raise TilingError("rules describe box tiles, not rectangular tiles")
    con = construction or GWConstruction(rules, seed, radii)
    W, H = con.world_size
    tiles = []
    for tid in range(N_COLORS**4):
        patch, target = con.make_tile(tid)
        if target > 0 and len(patch) < (1.0 - rules.tolerance) * target:
            achieved = len(patch) / (W * H)
            raise TilingError(
                f"density {rules.density:g}/A^2 unreachable: tile {tid} holds {len(patch)} of {target} "
                f"instances (achieved density {achieved:.6g}/A^2)"
            )
        order = np.lexsort((patch.pos[:, 2], patch.pos[:, 0], patch.model))
        tiles.append(GWTile(tid, colors_for(tid), patch.model[order].astype(np.int32),
                            np.ascontiguousarray(patch.pos[order][:, [0, 2]]),
                            np.ascontiguousarray(patch.rot[order]), (W, H)))
    return tiles


def generate_box_tile(rules: Rules, seed: int, radii: dict, tile_id: int = 0) -> BoxTile:
    """Collision-free box of instances (periodic collision checks); deterministic in ``(rules, seed)``."""
    if not rules.is_box:
        raise TilingError("rules describe rectangular tiles, not box tiles")
    r, cumw = _model_tables(rules, radii) if rules.models else (np.empty(0), np.ones(1))
    size = np.array(rules.tile_world_size)
    target = int(round(rules.density * float(np.prod(size))))
    pos, model = _throw((0, 0, 0), (1, 1, 1), size, np.empty((0, 3)), np.empty(0), target, r, cumw,
                        hash64(seed, string_key("box"), tile_id), rules.max_attempts, periodic=True)
    if target > 0 and len(model) < (1.0 - rules.tolerance) * target:
        raise TilingError(
            f"density {rules.density:g}/A^3 unreachable: box tile {tile_id} holds {len(model)} of {target} "
            f"instances (achieved density {len(model) / np.prod(size):.6g}/A^3)"
        )
    order = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0], model))
    rng = np.random.default_rng(hash64(seed, string_key("box-rot"), tile_id))
    return BoxTile(tile_id, model[order].astype(np.int32), np.ascontiguousarray(pos[order]),
                   _box_rotations(len(model), rng), tuple(size.tolist()))


def build_tileset(set_id: str, rules_list, seed: int, models: dict) -> TileSet:
    """Tile set from membrane and/or box rules; ``models`` maps ids to ``MolecularModel``."""
    names: list[str] = []
    for rules in rules_list:
        for m, _ in rules.models:
            if m not in names:
                names.append(m)
    radii = {}
    for m in names:
        if m not in models:
            raise TilingError(f"rules reference unknown model {m!r}")
        radii[m] = models[m].bounding_radius
    ts = TileSet(set_id, names)
    seen_gw = seen_box = False
    for rules in rules_list:
        remap = np.array([names.index(m) for m, _ in rules.models] or [0], dtype=np.int32)
        if rules.is_box:
            if seen_box:
                raise TilingError("only one box rule set per tile set")
            seen_box = True
            for v in range(rules.variants):
                b = generate_box_tile(rules, hash64(seed, string_key(set_id)), radii, v)
                b.model_ids = remap[b.model_ids]
                ts.box_tiles.append(b)
        else:
            if seen_gw:
                raise TilingError("only one rectangular rule set per tile set")
            seen_gw = True
            con = GWConstruction(rules, hash64(seed, string_key(set_id)), radii)
            tiles = generate_gw_tileset(rules, hash64(seed, string_key(set_id)), radii, con)
            for t in tiles:
                t.model_ids = remap[t.model_ids]
            ts.gw_tiles = tiles
            ts.strip_width = con.strip_width
            ts.base_color = tuple(rules.base_color)
    return ts


# ---------------------------------------------------------------- file format


def write_tileset(ts: TileSet, path) -> None:
    blobs = []
    offset = 0
    header = {
        "set_id": ts.set_id,
        "models": ts.models,
        "strip_width": ts.strip_width,
        "base_color": list(ts.base_color),
        "gw_world_size": list(ts.gw_world_size) if ts.gw_tiles else None,
        "box_world_size": list(ts.box_world_size) if ts.box_tiles else None,
        "tileL_max": ts.tileL_max,
        "tileB_max": ts.tileB_max,
        "gw_tiles": [],
        "box_tiles": [],
    }
    for t in ts.gw_tiles:
        rec = np.zeros(len(t), RECORD)
        rec["model"] = t.model_ids
        rec["pos"][:, 0] = t.coords[:, 0]
        rec["pos"][:, 2] = t.coords[:, 1]
        rec["rot"] = t.rotations
        header["gw_tiles"].append({"tile_id": t.tile_id, "edge_colors": list(t.edge_colors), "count": len(t), "offset": offset})
        blobs.append(rec.tobytes())
        offset += rec.nbytes
    for t in ts.box_tiles:
        rec = np.zeros(len(t), RECORD)
        rec["model"] = t.model_ids
        rec["pos"] = t.coords
        rec["rot"] = t.rotations
        header["box_tiles"].append({"tile_id": t.tile_id, "count": len(t), "offset": offset})
        blobs.append(rec.tobytes())
        offset += rec.nbytes
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(struct.pack("<I", len(hb)) + hb + b"".join(blobs))


def load_tileset(path) -> TileSet:
    data = Path(path).read_bytes()
    try:
        (n,) = struct.unpack_from("<I", data, 0)
        header = json.loads(data[4 : 4 + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TilingError(f"{path}: not a tile set file ({exc})") from None
    blob = data[4 + n :]

    def records(entry):
        k = entry["count"]
        return np.frombuffer(blob, RECORD, count=k, offset=entry["offset"])

    ts = TileSet(header["set_id"], list(header["models"]), strip_width=float(header["strip_width"]),
                 base_color=tuple(header.get("base_color", (0.8, 0.7, 0.5))))
    for e in header["gw_tiles"]:
        rec = records(e)
        ts.gw_tiles.append(GWTile(
            int(e["tile_id"]), tuple(e["edge_colors"]), rec["model"].astype(np.int32),
            np.ascontiguousarray(rec["pos"][:, [0, 2]].astype(np.float64)),
            rec["rot"].astype(np.float64), tuple(header["gw_world_size"]),
        ))
    for e in header["box_tiles"]:
        rec = records(e)
        ts.box_tiles.append(BoxTile(
            int(e["tile_id"]), rec["model"].astype(np.int32), rec["pos"].astype(np.float64),
            rec["rot"].astype(np.float64), tuple(header["box_world_size"]),
        ))
    return ts


# ---------------------------------------------------------------- recipe


@dataclass(eq=False)
class TileRecipe:
    dims: tuple[int, int]
    entries: np.ndarray  # (U, V) tile ids, indexed [u, v]
    tile_uvsize: np.ndarray  # (2,)
    rep: tuple[int, int]  # tiles covering t_big
    mesh_id: str = ""

    def origin(self, index) -> np.ndarray:
        return np.asarray(index, dtype=np.float64) * self.tile_uvsize


def uv_jacobian(tri_pos, tri_uv):
    """World-space derivatives ``(dP/du, dP/dv)`` of the affine uv map of one triangle."""
    e1 = tri_pos[1] - tri_pos[0]
    e2 = tri_pos[2] - tri_pos[0]
    d1 = tri_uv[1] - tri_uv[0]
    d2 = tri_uv[2] - tri_uv[0]
    det = d1[0] * d2[1] - d1[1] * d2[0]
    if det == 0:
        raise TilingError("triangle has a degenerate uv parameterization")
    Tu = (e1 * d2[1] - e2 * d1[1]) / det
    Tv = (e2 * d1[0] - e1 * d2[0]) / det
    return Tu, Tv


def tile_repetition(tri_pos, tri_uv, tile_world_size):
    """Tiles per axis needed to cover a triangle's uv box at its world scale."""
    Tu, Tv = uv_jacobian(tri_pos, tri_uv)
    ext = tri_uv.max(axis=0) - tri_uv.min(axis=0)
    W, H = tile_world_size
    ru = max(1, math.ceil(np.linalg.norm(Tu) * ext[0] / W - 1e-9))
    rv = max(1, math.ceil(np.linalg.norm(Tv) * ext[1] / H - 1e-9))
    return ru, rv


def build_tile_recipe(mesh, tile, seed: int, tiles=None) -> TileRecipe:
    """Wang recipe over the mesh's uv square.

    ``tile`` is a representative GWTile or a ``(width, height)`` world size;
    ``tiles`` (default: the complete 16-tile set) supplies edge colors.
    """
    world = tile.world_size if hasattr(tile, "world_size") else tuple(tile)
    tb = mesh.t_big
    tri_uv = mesh.tri_uvs[tb]
    tri_pos = mesh.tri_positions[tb]
    ext = tri_uv.max(axis=0) - tri_uv.min(axis=0)
    if np.any(ext <= 0):
        raise TilingError(f"mesh {mesh.mesh_id!r}: largest triangle has a degenerate uv extent")
    rep = tile_repetition(tri_pos, tri_uv, world)
    size = ext / np.array(rep, dtype=np.float64)
    dims = tuple(int(max(1, math.ceil(1.0 / s - 1e-9))) for s in size)
    entries = fill_recipe(dims, seed, tiles)
    return TileRecipe(dims, entries, size, rep, mesh.mesh_id)


def fill_recipe(dims, seed: int, tiles=None) -> np.ndarray:
    """Scanline Wang fill: west/south colors fixed by placed neighbours, the rest seeded."""
    if tiles is None:
        colors = {tid: colors_for(tid) for tid in range(N_COLORS**4)}
    else:
        colors = {t.tile_id: tuple(t.edge_colors) for t in tiles}
    by_ws: dict = {}
    for tid, (n, e, s, w) in sorted(colors.items()):
        by_ws.setdefault((w, s), []).append(tid)
    rng = np.random.default_rng(hash64(seed, string_key("recipe")))
    U, V = dims
    out = np.empty((U, V), dtype=np.int32)
    for b in range(V):
        for a in range(U):
            if a == 0 and b == 0:
                cands = sorted(colors)
            else:
                w = colors[int(out[a - 1, b])][1] if a > 0 else None
                s = colors[int(out[a, b - 1])][0] if b > 0 else None
                cands = [t for t in sorted(colors)
                         if (w is None or colors[t][3] == w) and (s is None or colors[t][2] == s)]
            if not cands:
                raise TilingError("tile set cannot satisfy the Wang edge constraints")
            out[a, b] = cands[int(rng.integers(len(cands)))]
    return out


def recipe_adjacency_violations(recipe: TileRecipe, tiles=None) -> list:
    colors = ({t.tile_id: tuple(t.edge_colors) for t in tiles} if tiles is not None
              else {tid: colors_for(tid) for tid in range(N_COLORS**4)})
    bad = []
    U, V = recipe.dims
    e = recipe.entries
    for a in range(U):
        for b in range(V):
            c = colors[int(e[a, b])]
            if a + 1 < U and c[1] != colors[int(e[a + 1, b])][3]:
                bad.append(((a, b), (a + 1, b)))
            if b + 1 < V and c[0] != colors[int(e[a, b + 1])][2]:
                bad.append(((a, b), (a, b + 1)))
    return bad


_ONE_BELOW = np.nextafter(1.0, 0.0)


def recipe_index(uv, recipe: TileRecipe):
    uv = np.asarray(uv, dtype=np.float64)
    dims = np.array(recipe.dims)
    return np.clip(np.floor(uv / recipe.tile_uvsize).astype(np.int64), 0, dims - 1)


def recipe_lookup(uv, recipe: TileRecipe):
    """``(tile_id, rel_uv)`` for uv of shape ``(2,)`` or ``(n, 2)``."""
    uv = np.asarray(uv, dtype=np.float64)
    idx = recipe_index(uv, recipe)
    rel = np.clip(uv / recipe.tile_uvsize - idx, 0.0, _ONE_BELOW)
    tid = recipe.entries[idx[..., 0], idx[..., 1]]
    if uv.ndim == 1:
        return int(tid), rel
    return tid, rel


@dataclass(frozen=True)
class SubGrid:
    tile_ref: tuple[int, int]
    tile_trans: np.ndarray
    rep_u: int
    rep_v: int


def compute_subgrid(tri_uv, recipe: TileRecipe) -> SubGrid:
    """Reference tile, offset and size of the tile block covering a triangle.

    The block has the recipe's global ``rep`` size unless the triangle's uv box
    straddles more tile boundaries, in which case it grows to cover it.
    """
    tri_uv = np.asarray(tri_uv, dtype=np.float64)
    lo = tri_uv.min(axis=0)
    hi = tri_uv.max(axis=0)
    ref = recipe_index(lo, recipe)
    last = recipe_index(hi, recipe)
    span = last - ref + 1
    rep_u = max(recipe.rep[0], int(span[0]))
    rep_v = max(recipe.rep[1], int(span[1]))
    trans = recipe.origin(ref) - lo
    return SubGrid((int(ref[0]), int(ref[1])), trans, rep_u, rep_v)


# ---------------------------------------------------------------- checks


def strip_set(tile: GWTile, side: str, hu: float, hv: float):
    """Instances in a tile's half-strip along one edge, in that edge's frame.

    East/north coordinates are shifted by -1 so both sides of a seam share a frame.
    """
    u, v = tile.coords[:, 0], tile.coords[:, 1]
    if side == "east":
        m = u >= 1 - hu
        c = np.stack([u - 1.0, v], axis=1)
    elif side == "west":
        m = u < hu
        c = np.stack([u, v], axis=1)
    elif side == "north":
        m = v >= 1 - hv
        c = np.stack([u, v - 1.0], axis=1)
    elif side == "south":
        m = v < hv
        c = np.stack([u, v], axis=1)
    else:
        raise ValueError(side)
    return {(int(a), float(x), float(y), *map(float, r))
            for a, (x, y), r in zip(tile.model_ids[m], c[m], tile.rotations[m])}


def seam_violations(recipe: TileRecipe, ts: TileSet) -> list:
    """Adjacent recipe pairs whose combined seam strip differs from the reference strip of that color."""
    hu, hv = ts.strip_halfwidth()
    tiles = {t.tile_id: t for t in ts.gw_tiles}
    ref_e, ref_w, ref_n, ref_s = {}, {}, {}, {}
    for t in ts.gw_tiles:
        ref_e.setdefault(t.east, strip_set(t, "east", hu, hv))
        ref_w.setdefault(t.west, strip_set(t, "west", hu, hv))
        ref_n.setdefault(t.north, strip_set(t, "north", hu, hv))
        ref_s.setdefault(t.south, strip_set(t, "south", hu, hv))
    cache = {}

    def strips(tid):
        if tid not in cache:
            t = tiles[tid]
            cache[tid] = {s: strip_set(t, s, hu, hv) for s in ("east", "west", "north", "south")}
        return cache[tid]

    bad = []
    U, V = recipe.dims
    e = recipe.entries
    for a in range(U):
        for b in range(V):
            A = tiles[int(e[a, b])]
            if a + 1 < U:
                B = tiles[int(e[a + 1, b])]
                c = A.east
                if (A.east != B.west or strips(A.tile_id)["east"] | strips(B.tile_id)["west"] != ref_e[c] | ref_w[c]):
                    bad.append(((a, b), (a + 1, b)))
            if b + 1 < V:
                B = tiles[int(e[a, b + 1])]
                c = A.north
                if (A.north != B.south or strips(A.tile_id)["north"] | strips(B.tile_id)["south"] != ref_n[c] | ref_s[c]):
                    bad.append(((a, b), (a, b + 1)))
    return bad


def pairwise_collisions(coords, model_ids, radii, scale, periodic=False) -> int:
    """Count of instance pairs closer than the sum of their radii (brute force)."""
    c = np.asarray(coords, dtype=np.float64)
    if len(c) < 2:
        return 0
    r = np.asarray(radii)[np.asarray(model_ids)]
    bad = 0
    for i in range(len(c) - 1):
        d = c[i + 1 :] - c[i]
        if periodic:
            d -= np.round(d)
        d *= scale
        dist2 = np.einsum("ij,ij->i", d, d)
        bad += int(np.sum(dist2 < (r[i + 1 :] + r[i]) ** 2))
    return bad

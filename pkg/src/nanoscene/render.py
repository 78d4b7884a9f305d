"""Sort-last ray tracing over per-cell structures, shading, ambient occlusion,
image-impostor atlases and the molecular/cellular blend.

Pass 1 traces every primary ray against each active cell's TLAS separately
and keeps one hit buffer per cell. Pass 2 picks the nearest hit per pixel,
shades it, and falls back to the impostor-textured mesh (the cellular path)
where no molecule is hit.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .accel import (
    SHADING_TMIN,
    BlasTable,
    Tlas,
    build_tlas,
    merge_tlases,
    pack_tlases,
    ray_box_interval,
    trace_closest_batch,
)
from .geometry import hash64, string_key
from .tiling import N_COLORS, TileRecipe, TileSet, colors_for, recipe_lookup

MISS = -1
GBUFFER_DTYPE = np.dtype([("depth", "<f4"), ("cell", "<i4"), ("instance", "<i4"), ("atom", "<i4")])


class RenderError(ValueError):
    pass


@dataclass
class ShadingParams:
    light_dir: tuple[float, float, float] = (0.4, 0.8, 0.45)
    ambient: float = 0.3
    diffuse: float = 0.65
    specular: float = 0.15
    shininess: float = 24.0
    ao_rays: int = 16
    ao_max_distance: float | None = None  # None: one cell size
    band_width: float | None = None  # None: one cell size
    border_fix: bool = True
    background: tuple[float, float, float] = (0.04, 0.05, 0.08)
    seed: int = 0
    bake_ao_rays: int = 16
    bake_ao_distance: float | None = None  # None: the tile strip width
    atlas_resolution: int = 256

    def __post_init__(self):
        for name in ("ambient", "diffuse", "specular"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise RenderError(f"{name} coefficient must lie in [0, 1], got {v}")
        if self.ao_rays < 0 or self.bake_ao_rays < 0:
            raise RenderError("AO ray count must be >= 0")
        if self.atlas_resolution < 2:
            raise RenderError("atlas resolution must be >= 2 texels per tile")
        n = np.linalg.norm(self.light_dir)
        if n == 0:
            raise RenderError("light direction must be non-zero")

    @property
    def light(self) -> np.ndarray:
        d = np.asarray(self.light_dir, dtype=np.float64)
        return d / np.linalg.norm(d)

    @classmethod
    def from_dict(cls, d: dict | None):
        d = dict(d or {})
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- shading


def shade_phong(normal, view, color, params: ShadingParams, ao=1.0) -> np.ndarray:
    """Phong shading of unit normals/view vectors; ``ao`` scales the ambient and diffuse terms."""
    n = np.asarray(normal, dtype=np.float64).reshape(-1, 3)
    v = np.asarray(view, dtype=np.float64).reshape(-1, 3)
    c = np.broadcast_to(np.asarray(color, dtype=np.float64), n.shape)
    ao = np.broadcast_to(np.asarray(ao, dtype=np.float64), (len(n),))
    l = params.light
    ndl = n @ l
    r = 2.0 * ndl[:, None] * n - l
    rdv = np.einsum("ij,ij->i", r, v)
    spec = np.where(ndl > 0, np.maximum(rdv, 0.0) ** params.shininess, 0.0)
    lit = (params.ambient + params.diffuse * np.maximum(ndl, 0.0)) * ao
    out = lit[:, None] * c + params.specular * spec[:, None]
    out = np.clip(out, 0.0, 1.0)
    return out[0] if np.ndim(normal) == 1 else out


def alpha_transition(molecular, cellular, position, window_lo, window_hi, band_width) -> np.ndarray:
    """Blend by distance to the window's outer boundary: molecular inside, cellular on the boundary."""
    p = np.asarray(position, dtype=np.float64).reshape(-1, 3)
    d = np.minimum(p - np.asarray(window_lo), np.asarray(window_hi) - p).min(axis=1)
    a = np.clip(d / float(band_width), 0.0, 1.0)[:, None]
    m = np.asarray(molecular, dtype=np.float64).reshape(-1, 3)
    c = np.asarray(cellular, dtype=np.float64).reshape(-1, 3)
    out = a * m + (1.0 - a) * c
    return out[0] if np.ndim(position) == 1 else out


# ---------------------------------------------------------------- active structures


@dataclass(eq=False)
class ActiveCells:
    """TLASes of the active cells, ordered by linear cell index."""

    cells: list
    linear: np.ndarray
    tlases: list
    cell_lo: np.ndarray
    cell_hi: np.ndarray
    clip_lo: np.ndarray
    clip_hi: np.ndarray
    pack: K.TlasArrays

    @classmethod
    def build(cls, tlases: dict, grid):
        cells = sorted(tlases, key=grid.linear_index)
        tl = [tlases[c] for c in cells]
        lo = np.array([grid.cell_box(c)[0] for c in cells]).reshape(-1, 3)
        hi = np.array([grid.cell_box(c)[1] for c in cells]).reshape(-1, 3)
        clo, chi = lo.copy(), hi.copy()
        for n, t in enumerate(tl):
            b = t.bounds
            if b is not None:
                clo[n] = np.minimum(clo[n], b[0])
                chi[n] = np.maximum(chi[n], b[1])
        return cls(cells, np.array([grid.linear_index(c) for c in cells], dtype=np.int64), tl, lo, hi,
                   clo, chi, pack_tlases(tl))

    def __len__(self) -> int:
        return len(self.cells)

    def merged(self, table: BlasTable) -> tuple[Tlas, np.ndarray]:
        return merge_tlases(self.tlases, table)


@dataclass(eq=False)
class CellFrameBuffer:
    cell: tuple
    linear_index: int
    depth: np.ndarray  # (H, W), -1 on a miss
    instance: np.ndarray  # (H, W) int32, -1 on a miss
    atom: np.ndarray  # (H, W) int32, -1 on a miss


@dataclass(eq=False)
class Composite:
    """Per-pixel nearest molecular hit: depth, index into the active list, instance and atom."""

    depth: np.ndarray
    slot: np.ndarray
    instance: np.ndarray
    atom: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return self.instance >= 0


def _clip_eps(t0, t1):
    span = np.maximum(np.abs(t0), np.abs(t1))
    return np.maximum(t0 - 1e-9 * span - 1e-9, 0.0), t1 + 1e-9 * span + 1e-9


def render_pass1(active: ActiveCells, camera, table: BlasTable) -> list[CellFrameBuffer]:
    """One hit buffer per active cell, each ray traced against that cell only.

    Rays are clipped to the cell box grown to its TLAS bounds, so atoms poking
    out of their cell are still found by the cell that owns the instance.
    """
    W, H = camera.width, camera.height
    O, D = camera.rays()
    bufs = []
    rows, ks, t0s, t1s = [], [], [], []
    for k in range(len(active)):
        if len(active.tlases[k]) == 0:
            continue
        t0, t1 = ray_box_interval(O, D, active.clip_lo[k], active.clip_hi[k])
        ok = (t1 >= t0) & (t1 >= 0)
        idx = np.nonzero(ok)[0]
        a, b = _clip_eps(t0[idx], t1[idx])
        rows.append(idx)
        ks.append(np.full(len(idx), k, np.int32))
        t0s.append(a)
        t1s.append(b)
    if rows:
        r = np.concatenate(rows)
        t, i, p, _, _ = trace_closest_batch(O[r], D[r], active.pack, table, np.concatenate(ks),
                                            np.concatenate(t0s), np.concatenate(t1s))
    start = 0
    n_by_k = {int(kk[0]): len(kk) for kk in ks if len(kk)}
    for k, cell in enumerate(active.cells):
        depth = np.full(W * H, -1.0)
        inst = np.full(W * H, MISS, np.int32)
        atom = np.full(W * H, MISS, np.int32)
        n = n_by_k.get(k, 0)
        if n:
            sl = slice(start, start + n)
            rr = r[sl]
            depth[rr] = t[sl]
            inst[rr] = i[sl]
            atom[rr] = p[sl]
            start += n
        bufs.append(CellFrameBuffer(tuple(cell), int(active.linear[k]), depth.reshape(H, W),
                                    inst.reshape(H, W), atom.reshape(H, W)))
    return bufs


def composite_buffers(buffers: list[CellFrameBuffer]) -> Composite:
    """Nearest hit per pixel; equal depths go to the lowest linear cell index, then lowest instance."""
    if not buffers:
        raise RenderError("no buffers to composite")
    shape = buffers[0].depth.shape
    order = sorted(range(len(buffers)), key=lambda n: buffers[n].linear_index)
    best_t = np.full(shape, np.inf)
    slot = np.full(shape, MISS, np.int32)
    inst = np.full(shape, MISS, np.int32)
    atom = np.full(shape, MISS, np.int32)
    for n in order:
        b = buffers[n]
        hit = b.instance >= 0
        better = hit & ((b.depth < best_t) | ((b.depth == best_t) & (slot < 0)))
        best_t = np.where(better, b.depth, best_t)
        slot = np.where(better, n, slot)
        inst = np.where(better, b.instance, inst)
        atom = np.where(better, b.atom, atom)
    return Composite(np.where(slot >= 0, best_t, -1.0), slot, inst, atom)


def render_merged(active: ActiveCells, camera, table: BlasTable) -> Composite:
    """Reference visibility: one TLAS over every active instance, cells concatenated in linear order."""
    W, H = camera.width, camera.height
    O, D = camera.rays()
    tl, offsets = active.merged(table)
    t, i, p, _, _ = trace_closest_batch(O, D, pack_tlases([tl]), table, 0, 0.0, np.inf)
    hit = i >= 0
    slot = np.where(hit, np.searchsorted(offsets, i, side="right") - 1, MISS).astype(np.int32)
    local = np.where(hit, i - offsets[np.maximum(slot, 0)], MISS).astype(np.int32)
    return Composite(np.where(hit, t, -1.0).reshape(H, W), slot.reshape(H, W), local.reshape(H, W),
                     np.where(hit, p, MISS).astype(np.int32).reshape(H, W))


def composite_records(comp: Composite, active: ActiveCells) -> np.ndarray:
    """G-buffer records: f32 depth, linear cell index, instance and atom ids, -1 on a miss."""
    out = np.empty(comp.depth.shape, dtype=GBUFFER_DTYPE)
    hit = comp.hit
    out["depth"] = np.where(hit, comp.depth, -1.0).astype(np.float32)
    lin = active.linear[np.maximum(comp.slot, 0)] if len(active) else np.zeros(comp.slot.shape, np.int64)
    out["cell"] = np.where(hit, lin, MISS)
    out["instance"] = np.where(hit, comp.instance, MISS)
    out["atom"] = np.where(hit, comp.atom, MISS)
    return out


# ---------------------------------------------------------------- molecular hits


@dataclass(eq=False)
class AtomTable:
    """All atoms of all models, concatenated, for vectorised gathers."""

    base: np.ndarray
    positions: np.ndarray
    radii: np.ndarray
    colors: np.ndarray

    @classmethod
    def of(cls, models):
        base = np.cumsum([0] + [len(m.radii) for m in models])
        pos = np.concatenate([m.positions for m in models]) if models else np.empty((0, 3))
        rad = np.concatenate([m.radii for m in models]) if models else np.empty(0)
        col = np.array([m.color for m in models], dtype=np.float64).reshape(-1, 3)
        return cls(base, pos, rad, col)


def atom_geometry(pack: K.TlasArrays, slots, instances, atoms, atom_table: AtomTable):
    """World centres, radii, and model ids of hit atoms."""
    g = pack.inst_base[slots] + instances
    model = pack.inst_blas[g]
    a = atom_table.base[model] + atoms
    R = pack.inst_rot[g]
    c = np.einsum("nij,nj->ni", R, atom_table.positions[a]) + pack.inst_pos[g]
    return c, atom_table.radii[a], model


def ambient_occlusion(points, normals, owner, centers, radii, pack: K.TlasArrays, table: BlasTable,
                      cell_lo, cell_hi, n_rays, max_dist, seed, keys, border_fix=True) -> np.ndarray:
    """Unoccluded fraction of ``n_rays`` cosine-weighted rays per hit.

    Rays are traced against the owning structure; with ``border_fix`` an atom
    crossing its cell box also traces every structure whose box it touches.
    """
    P = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(P)
    out = np.ones(n)
    if n == 0 or n_rays <= 0:
        return out
    K.ao_batch(pack, table.pack(), P, np.ascontiguousarray(normals, dtype=np.float64),
               np.ascontiguousarray(owner, dtype=np.int32), np.ascontiguousarray(centers, dtype=np.float64),
               np.ascontiguousarray(radii, dtype=np.float64), np.ascontiguousarray(cell_lo, dtype=np.float64),
               np.ascontiguousarray(cell_hi, dtype=np.float64), int(n_rays), float(max_dist), SHADING_TMIN,
               np.uint64(seed % 2**64), np.ascontiguousarray(keys, dtype=np.uint64), bool(border_fix), out)
    return out


# ---------------------------------------------------------------- texture atlas


@dataclass(eq=False)
class TextureAtlas:
    """Baked GW tiles: 8-bit diffuse, coverage, normal (0.5 n + 0.5) and AO layers."""

    resolution: int
    origins: dict  # tile_id -> (x0, y0) pixel origin
    diffuse: np.ndarray  # (AH, AW, 3) uint8
    coverage: np.ndarray  # (AH, AW) uint8
    normal: np.ndarray  # (AH, AW, 3) uint8
    ao: np.ndarray  # (AH, AW) uint8
    world_size: tuple = (1.0, 1.0)
    base_color: tuple = (0.8, 0.7, 0.5)

    def tile(self, tile_id: int, layer: str = "diffuse") -> np.ndarray:
        """Sub-image indexed ``[v, u]`` (rows follow v)."""
        x0, y0 = self.origins[int(tile_id)]
        R = self.resolution
        return getattr(self, layer)[y0:y0 + R, x0:x0 + R]


def _u8(x):
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


class _Frame:
    """Instances of one bake frame (tile, band or corner) in world units of the tile plane."""

    def __init__(self, coords, models, rots, W, H, table: BlasTable):
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        pos = np.stack([coords[:, 0] * W, np.zeros(len(coords)), coords[:, 1] * H], axis=1)
        self.tlas = build_tlas(np.asarray(models, dtype=np.int32), np.asarray(rots).reshape(-1, 4), pos, table)
        self.pack = pack_tlases([self.tlas])


def _tile_regions(coords, hu, hv):
    """Region label per tile instance: 0 interior, 1 west, 2 east, 3 south, 4 north band half, 5 corner."""
    u, v = coords[:, 0], coords[:, 1]
    cu = (u < 2 * hu) | (u >= 1 - 2 * hu)
    cv = (v < 2 * hv) | (v >= 1 - 2 * hv)
    lab = np.zeros(len(u), np.int32)
    lab[(u < hu) & ~cv] = 1
    lab[(u >= 1 - hu) & ~cv] = 2
    lab[(v < hv) & ~cu] = 3
    lab[(v >= 1 - hv) & ~cu] = 4
    lab[cu & cv] = 5
    return lab


class _SharedParts:
    """Corner patch and per-color bands recovered from a complete GW tile set."""

    def __init__(self, ts: TileSet):
        self.hu, self.hv = ts.strip_halfwidth()
        by_id = {t.tile_id: t for t in ts.gw_tiles}
        if sorted(by_id) != list(range(N_COLORS**4)):
            raise RenderError(f"tile set {ts.set_id!r} is not a complete Wang set")
        self.tiles = by_id
        self.labels = {t.tile_id: _tile_regions(t.coords, self.hu, self.hv) for t in ts.gw_tiles}

        def part(tid, lab, du=0.0, dv=0.0, mask=None):
            t = by_id[tid]
            sel = self.labels[tid] == lab
            if mask is not None:
                sel &= mask(t.coords)
            c = t.coords[sel] + np.array([du, dv])
            return c, t.model_ids[sel], t.rotations[sel]

        def cat(parts):
            return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                    np.concatenate([p[2] for p in parts]))

        hu, hv = self.hu, self.hv
        # corner patch around (0, 0): quadrants of any tile, shifted into place
        q = [part(0, 5, 0.0, 0.0, lambda c: (c[:, 0] < 2 * hu) & (c[:, 1] < 2 * hv)),
             part(0, 5, -1.0, 0.0, lambda c: (c[:, 0] >= 1 - 2 * hu) & (c[:, 1] < 2 * hv)),
             part(0, 5, 0.0, -1.0, lambda c: (c[:, 0] < 2 * hu) & (c[:, 1] >= 1 - 2 * hv)),
             part(0, 5, -1.0, -1.0, lambda c: (c[:, 0] >= 1 - 2 * hu) & (c[:, 1] >= 1 - 2 * hv))]
        self.corner = cat(q)
        self.vband, self.hband = [], []
        for c in range(N_COLORS):
            west = next(t for t in sorted(by_id) if colors_for(t)[3] == c)
            east = next(t for t in sorted(by_id) if colors_for(t)[1] == c)
            self.vband.append(cat([part(west, 1), part(east, 2, du=-1.0)]))
            south = next(t for t in sorted(by_id) if colors_for(t)[2] == c)
            north = next(t for t in sorted(by_id) if colors_for(t)[0] == c)
            self.hband.append(cat([part(south, 3), part(north, 4, dv=-1.0)]))

    @staticmethod
    def shifted(part, du=0.0, dv=0.0):
        return part[0] + np.array([du, dv]), part[1], part[2]

    def band_frame(self, vertical: bool, color: int):
        """A band with the corner patches at both of its ends, in the band's own frame."""
        if vertical:
            parts = [self.vband[color], self.corner, self.shifted(self.corner, dv=1.0)]
        else:
            parts = [self.hband[color], self.corner, self.shifted(self.corner, du=1.0)]
        return tuple(np.concatenate([p[k] for p in parts]) for k in range(3))

    def tile_frame(self, tile_id: int):
        """Tile interior plus its full bands and four corner patches, in tile coordinates."""
        n, e, s, w = colors_for(tile_id)
        t = self.tiles[tile_id]
        inner = self.labels[tile_id] == 0
        parts = [(t.coords[inner], t.model_ids[inner], t.rotations[inner]),
                 self.vband[w], self.shifted(self.vband[e], du=1.0), self.hband[s], self.shifted(self.hband[n], dv=1.0)]
        parts += [self.shifted(self.corner, du, dv) for du in (0.0, 1.0) for dv in (0.0, 1.0)]
        return tuple(np.concatenate([p[k] for p in parts]) for k in range(3))


def _bake_points(frame: _Frame, xs, zs, keys, atom_table: AtomTable, table: BlasTable, params: ShadingParams,
                 ytop: float, ao_dist: float):
    """Orthographic -y samples at world (x, z): diffuse, coverage, normal, ao (floats)."""
    n = len(xs)
    O = np.stack([xs, np.full(n, ytop), zs], axis=1)
    D = np.tile(np.array([0.0, -1.0, 0.0]), (n, 1))
    t, i, p, _, _ = trace_closest_batch(O, D, frame.pack, table, 0, 0.0, np.inf)
    hit = i >= 0
    diffuse = np.zeros((n, 3))
    normal = np.tile(np.array([0.0, 1.0, 0.0]), (n, 1))
    ao = np.ones(n)
    if np.any(hit):
        h = np.nonzero(hit)[0]
        zero = np.zeros(len(h), np.int32)
        c, r, model = atom_geometry(frame.pack, zero, i[h], p[h], atom_table)
        P = O[h] + t[h, None] * D[h]
        nrm = (P - c) / r[:, None]
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        diffuse[h] = atom_table.colors[model]
        normal[h] = nrm
        big = np.array([[-np.inf] * 3]), np.array([[np.inf] * 3])
        ao[h] = ambient_occlusion(P, nrm, zero, c, r, frame.pack, table, big[0], big[1], params.bake_ao_rays,
                                  ao_dist, params.seed, keys[h], border_fix=False)
    return diffuse, hit.astype(np.float64), normal, ao


def bake_texture_atlas(ts: TileSet, models: dict, params: ShadingParams | None = None,
                       resolution: int | None = None) -> TextureAtlas:
    """Top-down bake of every GW tile on a corner-inclusive texel grid ``x_i = i W / (R - 1)``.

    Texels closer than half a strip width to an edge only see that edge's band
    and corner patches, so they are rendered in the band's (or corner's) own
    frame with integer texel offsets; tiles sharing an edge color therefore get
    bit-identical strip texels.
    """
    params = params or ShadingParams()
    R = int(resolution or params.atlas_resolution)
    if R < 2:
        raise RenderError("atlas resolution must be >= 2")
    mlist = [models[m] for m in ts.models]
    table = BlasTable.from_assets(mlist)
    atoms = AtomTable.of(mlist)
    tiles = sorted(ts.gw_tiles, key=lambda t: t.tile_id)
    cols = max(1, math.ceil(math.sqrt(len(tiles))))
    rows = max(1, math.ceil(len(tiles) / cols))
    AH, AW = rows * R, cols * R
    atlas = TextureAtlas(R, {}, np.zeros((AH, AW, 3), np.uint8), np.zeros((AH, AW), np.uint8),
                         np.tile(_u8(np.array([0.5, 1.0, 0.5])), (AH, AW, 1)), np.full((AH, AW), 255, np.uint8),
                         ts.gw_world_size or (1.0, 1.0), tuple(ts.base_color))
    for n, t in enumerate(tiles):
        atlas.origins[t.tile_id] = ((n % cols) * R, (n // cols) * R)
    if not tiles or all(len(t) == 0 for t in tiles):
        return atlas
    W, H = ts.gw_world_size
    parts = _SharedParts(ts)
    ytop = max(m.bounding_radius for m in mlist) + 10.0
    ao_dist = params.bake_ao_distance if params.bake_ao_distance is not None else max(ts.strip_width, 1.0)
    # texel offsets from the nearest edge; strip texels lie within half a strip of it
    i = np.arange(R)
    off_lo, off_hi = i, i - (R - 1)
    near_lo_u = i * (W / (R - 1)) < 0.5 * parts.hu * W
    near_hi_u = (R - 1 - i) * (W / (R - 1)) < 0.5 * parts.hu * W
    near_lo_v = i * (H / (R - 1)) < 0.5 * parts.hv * H
    near_hi_v = (R - 1 - i) * (H / (R - 1)) < 0.5 * parts.hv * H
    near_u = near_lo_u | near_hi_u
    near_v = near_lo_v | near_hi_v
    ui = np.where(near_lo_u, off_lo, off_hi)
    vj = np.where(near_lo_v, off_lo, off_hi)

    offs_u = np.unique(ui[near_u])
    offs_v = np.unique(vj[near_v])
    iu = {int(o): n for n, o in enumerate(offs_u)}
    iv = {int(o): n for n, o in enumerate(offs_v)}
    xs_all = lambda offs: np.asarray(offs, dtype=np.float64) * (W / (R - 1))
    zs_all = lambda offs: np.asarray(offs, dtype=np.float64) * (H / (R - 1))

    def bake_grid(key, coords, ou, ov):
        """Bake all (ou x ov) texel offsets in one frame; returns uint8 layers shaped (len(ou), len(ov))."""
        fr = _Frame(coords[0], coords[1], coords[2], W, H, table)
        A, B = np.meshgrid(np.asarray(ou), np.asarray(ov), indexing="ij")
        a, b = A.ravel(), B.ravel()
        tag = string_key(key[0])
        keys = np.array([hash64(tag, key[1], int(x) + 2**20, int(y) + 2**20) for x, y in zip(a, b)], dtype=np.uint64)
        d, cov, nr, ao = _bake_points(fr, xs_all(a), zs_all(b), keys, atoms, table, params, ytop, ao_dist)
        shape = A.shape
        return (_u8(d).reshape(shape + (3,)), _u8(cov).reshape(shape), _u8(0.5 * nr + 0.5).reshape(shape + (3,)),
                _u8(ao).reshape(shape))

    corner = bake_grid(("corner", 0), parts.corner, offs_u, offs_v) if len(offs_u) and len(offs_v) else None
    vstrips: dict = {}
    hstrips: dict = {}
    for t in tiles:
        nc, ec, sc, wc = t.edge_colors
        for c in (wc, ec):
            if c not in vstrips and len(offs_u):
                vstrips[c] = bake_grid(("v", c), parts.band_frame(True, c), offs_u, i)
        for c in (sc, nc):
            if c not in hstrips and len(offs_v):
                hstrips[c] = bake_grid(("h", c), parts.band_frame(False, c), i, offs_v)
        layers = [np.zeros((R, R, 3), np.uint8), np.zeros((R, R), np.uint8), np.zeros((R, R, 3), np.uint8),
                  np.zeros((R, R), np.uint8)]
        inner_u = np.nonzero(~near_u)[0]
        inner_v = np.nonzero(~near_v)[0]
        if len(inner_u) and len(inner_v):
            res = bake_grid(("tile", t.tile_id), parts.tile_frame(t.tile_id), inner_u, inner_v)
            for L, r in zip(layers, res):
                L[np.ix_(inner_u, inner_v)] = r
        ku = np.array([iu.get(int(o), 0) for o in ui])
        kv = np.array([iv.get(int(o), 0) for o in vj])
        for a in np.nonzero(near_u)[0]:
            src = vstrips[wc if near_lo_u[a] else ec]
            for L, r in zip(layers, src):
                L[a, ~near_v] = r[ku[a], ~near_v]
            if corner is not None:
                for L, r in zip(layers, corner):
                    L[a, near_v] = r[ku[a], kv[near_v]]
        for b in np.nonzero(near_v)[0]:
            src = hstrips[sc if near_lo_v[b] else nc]
            for L, r in zip(layers, src):
                L[~near_u, b] = r[~near_u, kv[b]]
        x0, y0 = atlas.origins[t.tile_id]
        # layers are indexed [u, v]; the atlas rows follow v
        atlas.diffuse[y0:y0 + R, x0:x0 + R] = layers[0].transpose(1, 0, 2)
        atlas.coverage[y0:y0 + R, x0:x0 + R] = layers[1].T
        atlas.normal[y0:y0 + R, x0:x0 + R] = layers[2].transpose(1, 0, 2)
        atlas.ao[y0:y0 + R, x0:x0 + R] = layers[3].T
    return atlas


def sample_impostor(uv, recipe: TileRecipe, atlas: TextureAtlas):
    """Bilinear fetch at ``tile_origin + rel_uv (R - 1)``, clamped to the tile.

    Returns ``(diffuse (n,3), coverage (n,), normal (n,3), ao (n,))`` as floats,
    or single values for a single uv.
    """
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv = uv.reshape(-1, 2)
    tid, rel = recipe_lookup(uv, recipe)
    R = atlas.resolution
    try:
        org = np.array([atlas.origins[int(t)] for t in np.atleast_1d(tid)], dtype=np.int64).reshape(-1, 2)
    except KeyError as e:
        raise RenderError(f"atlas has no tile {e.args[0]}") from None
    f = rel * (R - 1)
    i0 = np.clip(np.floor(f).astype(np.int64), 0, R - 2)
    w = f - i0
    x0 = org[:, 0] + i0[:, 0]
    y0 = org[:, 1] + i0[:, 1]

    def fetch(layer):
        L = layer.astype(np.float64) / 255.0
        a, b = w[:, 0], w[:, 1]
        if L.ndim == 3:
            a, b = a[:, None], b[:, None]
        return ((1 - a) * (1 - b) * L[y0, x0] + a * (1 - b) * L[y0, x0 + 1]
                + (1 - a) * b * L[y0 + 1, x0] + a * b * L[y0 + 1, x0 + 1])

    d = fetch(atlas.diffuse)
    cov = fetch(atlas.coverage)
    nrm = 2.0 * fetch(atlas.normal) - 1.0
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
    ao = fetch(atlas.ao)
    if single:
        return d[0], float(cov[0]), nrm[0], float(ao[0])
    return d, cov, nrm, ao


# ---------------------------------------------------------------- atlas files


def write_atlas(atlas: TextureAtlas, path) -> None:
    """``<path>.diffuse.ppm``, ``.coverage.pgm``, ``.normal.ppm``, ``.ao.pgm`` and ``<path>.json``."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(atlas.diffuse, f"{p}.diffuse.ppm")
    write_pgm(atlas.coverage, f"{p}.coverage.pgm")
    write_ppm(atlas.normal, f"{p}.normal.ppm")
    write_pgm(atlas.ao, f"{p}.ao.pgm")
    meta = {
        "resolution": atlas.resolution,
        "origins": {str(k): list(v) for k, v in sorted(atlas.origins.items())},
        "world_size": list(atlas.world_size),
        "base_color": list(atlas.base_color),
    }
    Path(f"{p}.json").write_text(json.dumps(meta, indent=1))


def load_atlas(path) -> TextureAtlas:
    p = Path(path)
    try:
        meta = json.loads(Path(f"{p}.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise RenderError(f"cannot read atlas {p}: {e}") from None
    return TextureAtlas(
        int(meta["resolution"]),
        {int(k): tuple(v) for k, v in meta["origins"].items()},
        read_ppm(f"{p}.diffuse.ppm"),
        read_pgm(f"{p}.coverage.pgm"),
        read_ppm(f"{p}.normal.ppm"),
        read_pgm(f"{p}.ao.pgm"),
        tuple(meta.get("world_size", (1.0, 1.0))),
        tuple(meta.get("base_color", (0.8, 0.7, 0.5))),
    )


# ---------------------------------------------------------------- images


def _write_pnm(magic: bytes, arr: np.ndarray, path) -> None:
    h, w = arr.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr, np.uint8).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != magic or int(tokens[3]) != 255:
        raise RenderError(f"{path}: expected an 8-bit {magic.decode()} image")
    w, h = int(tokens[1]), int(tokens[2])
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h * channels], dtype=np.uint8)
    return pix.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def write_ppm(rgb: np.ndarray, path) -> None:
    _write_pnm(b"P6", rgb, path)


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def write_pgm(gray: np.ndarray, path) -> None:
    _write_pnm(b"P5", gray, path)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def encode_srgb(linear: np.ndarray) -> np.ndarray:
    """Linear [0,1] RGB to gamma-2.2 8-bit."""
    return _u8(np.clip(linear, 0.0, 1.0) ** (1.0 / 2.2))


def ppm_bytes(rgb8: np.ndarray) -> bytes:
    h, w = rgb8.shape[:2]
    return b"P6" + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb8, np.uint8).tobytes()


def frame_hash(rgb8: np.ndarray) -> str:
    return hashlib.sha256(ppm_bytes(rgb8)).hexdigest()


def write_gbuffer(records: np.ndarray, path) -> None:
    Path(path).write_bytes(np.ascontiguousarray(records, dtype=GBUFFER_DTYPE).tobytes())


def read_gbuffer(path, width: int, height: int) -> np.ndarray:
    rec = np.frombuffer(Path(path).read_bytes(), dtype=GBUFFER_DTYPE)
    if len(rec) != width * height:
        raise RenderError(f"{path}: expected {width * height} records, found {len(rec)}")
    return rec.reshape(height, width).copy()


# ---------------------------------------------------------------- cellular path


@dataclass(eq=False)
class CellularScene:
    """TLAS over all mesh instances with their recipes and impostor atlases."""

    world: object
    tlas: Tlas
    pack: K.TlasArrays
    atlases: dict = field(default_factory=dict)

    @classmethod
    def build(cls, world, atlases: dict | None = None):
        ids = [world.mesh_blas_index(i.mesh_id) for i in world.instances]
        tl = build_tlas(np.array(ids, dtype=np.int32), np.array([i.rotation for i in world.instances]).reshape(-1, 4),
                        np.array([i.position for i in world.instances]).reshape(-1, 3), world.blas_table, "cellular")
        return cls(world, tl, pack_tlases([tl]), dict(atlases or {}))

    def trace(self, O, D, t_min=0.0):
        return trace_closest_batch(O, D, self.pack, self.world.blas_table, 0, t_min, np.inf)

    def shade(self, O, D, t, inst, tri, bu, bv, params: ShadingParams) -> np.ndarray:
        """Impostor-textured Phong shading of mesh hits (all entries must be hits)."""
        n = len(t)
        out = np.empty((n, 3))
        world = self.world
        for m in np.unique(inst):
            sel = np.nonzero(inst == m)[0]
            g = world.geometry[int(m)]
            tr = tri[sel]
            uv = ((1.0 - bu[sel] - bv[sel])[:, None] * g.uvs[tr, 0] + bu[sel, None] * g.uvs[tr, 1]
                  + bv[sel, None] * g.uvs[tr, 2])
            uv = np.clip(uv, 0.0, 1.0)
            ts = world.tileset_for(int(m))
            base = np.asarray(ts.base_color if ts is not None else (0.7, 0.7, 0.7), dtype=np.float64)
            atlas = self.atlases.get(world.instances[int(m)].patch_id)
            recipe = world.recipe_for(int(m)) if atlas is not None else None
            if atlas is not None and recipe is not None:
                d, cov, nt, ao = sample_impostor(uv, recipe, atlas)
                color = cov[:, None] * d + (1.0 - cov[:, None]) * base
            else:
                color = np.broadcast_to(base, (len(sel), 3))
                nt = np.tile(np.array([0.0, 1.0, 0.0]), (len(sel), 1))
                ao = np.ones(len(sel))
            nw = np.einsum("nij,nj->ni", g.normal_frames[tr], nt)
            nw /= np.linalg.norm(nw, axis=1, keepdims=True)
            view = -D[sel]
            back = np.einsum("ij,ij->i", g.normals[tr], view) < 0
            nw[back] *= -1.0
            out[sel] = shade_phong(nw, view, color, params, ao)
        return out


# ---------------------------------------------------------------- frames


@dataclass(eq=False)
class FrameResult:
    image: np.ndarray  # (H, W, 3) linear RGB
    composite: Composite
    records: np.ndarray  # G-buffer records
    timings: dict

    @property
    def rgb8(self) -> np.ndarray:
        return encode_srgb(self.image)


def shade_frame(comp: Composite, active: ActiveCells, camera, world, params: ShadingParams,
                cellular: CellularScene | None, window_box, atom_table: AtomTable, ao_pack=None) -> np.ndarray:
    """Pass 2 shading of a composited hit buffer.

    ``ao_pack`` replaces the per-cell structures for occlusion rays (the
    merged reference passes a single structure here).
    """
    H, W = comp.depth.shape
    O, D = camera.rays()
    table = world.blas_table
    img = np.tile(np.asarray(params.background, dtype=np.float64), (H * W, 1))
    hit = comp.hit.ravel()
    slot = comp.slot.ravel()
    inst = comp.instance.ravel()
    atom = comp.atom.ravel()
    depth = comp.depth.ravel()
    cell = np.asarray(world.grid.size, dtype=np.float64)
    band = params.band_width if params.band_width is not None else float(cell.max())
    ao_dist = params.ao_max_distance if params.ao_max_distance is not None else float(cell.max())
    wlo, whi = window_box

    # cellular hits: the first one, and the first one outside the window
    cel_full = cel_far = None
    if cellular is not None and len(cellular.tlas):
        cel_full = cellular.trace(O, D, 0.0)
        _, t_exit = ray_box_interval(O, D, wlo, whi)
        cel_far = cellular.trace(O, D, np.maximum(t_exit, 0.0))

    def cellular_rgb(rows, res):
        t, i, p, u, v = res
        out = np.tile(np.asarray(params.background, dtype=np.float64), (len(rows), 1))
        h = i[rows] >= 0
        if np.any(h):
            r = rows[h]
            out[h] = cellular.shade(O[r], D[r], t[r], i[r], p[r], u[r], v[r], params)
        return out

    mol = hit.copy()
    if cel_far is not None:
        tf = cel_far[0]
        mol &= ~((cel_far[1] >= 0) & (tf < depth))
    rows = np.nonzero(mol)[0]
    if len(rows):
        c, r, model = atom_geometry(active.pack, slot[rows], inst[rows], atom[rows], atom_table)
        P = O[rows] + depth[rows, None] * D[rows]
        nrm = (P - c) / r[:, None]
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        keys = rows.astype(np.uint64)
        if params.ao_rays > 0:
            if ao_pack is None:
                ao = ambient_occlusion(P, nrm, slot[rows], c, r, active.pack, table, active.cell_lo, active.cell_hi,
                                       params.ao_rays, ao_dist, params.seed, keys, params.border_fix)
            else:
                inf = np.array([[-np.inf] * 3]), np.array([[np.inf] * 3])
                ao = ambient_occlusion(P, nrm, np.zeros(len(rows), np.int32), c, r, ao_pack, table, inf[0], inf[1],
                                       params.ao_rays, ao_dist, params.seed, keys, False)
        else:
            ao = np.ones(len(rows))
        rgb = shade_phong(nrm, -D[rows], atom_table.colors[model], params, ao)
        behind = cellular_rgb(rows, cel_full) if cel_full is not None else \
            np.tile(np.asarray(params.background, dtype=np.float64), (len(rows), 1))
        img[rows] = alpha_transition(rgb, behind, P, wlo, whi, band)
    if cel_full is not None:
        far_rows = np.nonzero(hit & ~mol)[0]
        if len(far_rows):
            img[far_rows] = cellular_rgb(far_rows, cel_far)
        rest = np.nonzero(~hit)[0]
        if len(rest):
            img[rest] = cellular_rgb(rest, cel_full)
    return img.reshape(H, W, 3)


def render_frame(active: ActiveCells, camera, world, params: ShadingParams, cellular: CellularScene | None = None,
                 window_box=None, single_structure: bool = False, atom_table: AtomTable | None = None) -> FrameResult:
    """Both passes for one camera; ``single_structure`` traces one merged TLAS instead of per-cell ones."""
    import time

    atom_table = atom_table or AtomTable.of(world.models)
    if window_box is None:
        window_box = (np.array(world.grid.min), np.array(world.grid.max))
    timings = {}
    t0 = time.perf_counter()
    ao_pack = None
    if len(active) == 0:
        H, W = camera.height, camera.width
        comp = Composite(np.full((H, W), -1.0), np.full((H, W), MISS, np.int32), np.full((H, W), MISS, np.int32),
                         np.full((H, W), MISS, np.int32))
    elif single_structure:
        comp = render_merged(active, camera, world.blas_table)
        tl, _ = active.merged(world.blas_table)
        ao_pack = pack_tlases([tl])
    else:
        comp = composite_buffers(render_pass1(active, camera, world.blas_table))
    timings["pass1_ms"] = 1e3 * (time.perf_counter() - t0)
    t1 = time.perf_counter()
    img = shade_frame(comp, active, camera, world, params, cellular, window_box, atom_table, ao_pack)
    timings["pass2_ms"] = 1e3 * (time.perf_counter() - t1)
    return FrameResult(img, comp, composite_records(comp, active), timings)

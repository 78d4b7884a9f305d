"""Two-level software acceleration structures.

Bottom-level hierarchies (BLAS) hold atom spheres of one molecular model or the
triangles of one mesh. Top-level hierarchies (TLAS) hold rigidly transformed
references to BLASes; the renderer keeps one per active cell plus one over all
mesh instances. Hierarchies are flat numpy arrays, frozen after build and
traversed by the compiled kernels in ``_kernels``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .geometry import quat_to_matrix
from .scene import Mesh, MolecularModel

SPHERES = K.SPHERES
TRIANGLES = K.TRIANGLES
SHADING_TMIN = 1e-3
MISS = -1

BLAS_LEAF = 4
BLAS_BINS = 16
TLAS_LEAF = 2


class AccelError(ValueError):
    pass


def _frozen(*arrays):
    for a in arrays:
        a.setflags(write=False)


def _pad(nmin, nmax):
    # conservative widening so rounding in the slab test never culls a true hit
    if len(nmin) == 0:
        return nmin, nmax
    scale = max(1.0, float(np.abs(nmin).max()), float(np.abs(nmax).max()))
    eps = 1e-9 * scale
    return nmin - eps, nmax + eps


@dataclass(eq=False)
class Blas:
    kind: int
    source_id: str
    node_min: np.ndarray
    node_max: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_count: np.ndarray
    prim_idx: np.ndarray
    spheres: np.ndarray  # (n, 4) x, y, z, r; empty for triangle kind
    tris: np.ndarray  # (n, 3, 3); empty for sphere kind
    tri_uvs: np.ndarray | None = None

    @property
    def n_prims(self) -> int:
        return len(self.spheres) if self.kind == SPHERES else len(self.tris)

    @property
    def bounds(self):
        return self.node_min[0].copy(), self.node_max[0].copy()


def _build_nodes(lo, hi, cent, leaf, sah):
    nmin, nmax, left, right, count, order = K.build_bvh(
        np.ascontiguousarray(lo, dtype=np.float64),
        np.ascontiguousarray(hi, dtype=np.float64),
        np.ascontiguousarray(cent, dtype=np.float64),
        leaf,
        sah,
        BLAS_BINS,
    )
    nmin, nmax = _pad(nmin, nmax)
    return nmin, nmax, left, right, count, order


def build_blas(source) -> Blas:
    """Hierarchy over the atoms of a ``MolecularModel`` or triangles of a ``Mesh``."""
    if isinstance(source, MolecularModel):
        pos = np.asarray(source.positions, dtype=np.float64)
        rad = np.asarray(source.radii, dtype=np.float64)
        if len(pos) == 0:
            raise AccelError(f"model {source.model_id!r} has no atoms")
        r3 = rad[:, None]
        nodes = _build_nodes(pos - r3, pos + r3, pos, BLAS_LEAF, True)
        spheres = np.concatenate([pos, r3], axis=1)
        blas = Blas(SPHERES, source.model_id, *nodes, spheres, np.empty((0, 3, 3)))
    elif isinstance(source, Mesh):
        tri = np.ascontiguousarray(source.tri_positions, dtype=np.float64)
        if len(tri) == 0:
            raise AccelError(f"mesh {source.mesh_id!r} has no triangles")
        nodes = _build_nodes(tri.min(axis=1), tri.max(axis=1), tri.mean(axis=1), BLAS_LEAF, True)
        blas = Blas(TRIANGLES, source.mesh_id, *nodes, np.empty((0, 4)), tri, np.asarray(source.tri_uvs))
    else:
        raise AccelError(f"cannot build a BLAS from {type(source).__name__}")
    _frozen(blas.node_min, blas.node_max, blas.node_left, blas.node_right, blas.node_count,
            blas.prim_idx, blas.spheres, blas.tris)
    return blas


class BlasTable:
    """Registry of BLASes; its index is the type id stored in instance records."""

    def __init__(self, blases=()):
        self._blases: list[Blas] = []
        self._index: dict[str, int] = {}
        self._pack = None
        for b in blases:
            self.add(b)

    @classmethod
    def from_assets(cls, models=(), meshes=()):
        return cls([build_blas(m) for m in models] + [build_blas(m) for m in meshes])

    def add(self, blas: Blas) -> int:
        key = (blas.kind, blas.source_id)
        if key in self._index:
            raise AccelError(f"duplicate BLAS for {blas.source_id!r}")
        self._index[key] = len(self._blases)
        self._blases.append(blas)
        self._pack = None
        return len(self._blases) - 1

    def index(self, source_id: str, kind: int = SPHERES) -> int:
        try:
            return self._index[(kind, source_id)]
        except KeyError:
            raise AccelError(f"no BLAS for {source_id!r}") from None

    def __getitem__(self, i) -> Blas:
        return self._blases[i]

    def __len__(self) -> int:
        return len(self._blases)

    def root_bounds(self):
        p = self.pack()
        return p.node_min[p.root], p.node_max[p.root]

    def pack(self) -> K.BlasArrays:
        if self._pack is not None:
            return self._pack
        bl = self._blases
        node_base = np.cumsum([0] + [len(b.node_min) for b in bl])
        prim_base = np.cumsum([0] + [b.n_prims for b in bl])
        sph_base = np.cumsum([0] + [len(b.spheres) for b in bl])
        tri_base = np.cumsum([0] + [len(b.tris) for b in bl])

        def cat(arrs, shape, dtype):
            return np.concatenate(arrs).astype(dtype) if arrs else np.empty((0,) + shape, dtype)

        left, right = [], []
        for n, b in enumerate(bl):
            leaf = b.node_count > 0
            left.append(np.where(leaf, b.node_left + prim_base[n], b.node_left + node_base[n]))
            right.append(np.where(b.node_right >= 0, b.node_right + node_base[n], -1))
        # prim ids stay local; kernels add the kind-specific base
        base = np.array(
            [sph_base[n] if b.kind == SPHERES else tri_base[n] for n, b in enumerate(bl)], dtype=np.int64
        )
        self._pack = K.BlasArrays(
            cat([b.node_min for b in bl], (3,), np.float64),
            cat([b.node_max for b in bl], (3,), np.float64),
            cat(left, (), np.int32),
            cat(right, (), np.int32),
            cat([b.node_count for b in bl], (), np.int32),
            cat([b.prim_idx for b in bl], (), np.int32),
            np.asarray(node_base[:-1], dtype=np.int32),
            np.array([b.kind for b in bl], dtype=np.int32),
            base,
            cat([b.spheres for b in bl], (4,), np.float64),
            cat([b.tris for b in bl], (3, 3), np.float64),
        )
        _frozen(*self._pack)
        return self._pack


@dataclass(eq=False)
class Tlas:
    owner: object
    blas_ids: np.ndarray  # (n,) type id per instance
    rotations: np.ndarray  # (n, 4) quaternions
    positions: np.ndarray  # (n, 3)
    matrices: np.ndarray  # (n, 3, 3)
    inst_min: np.ndarray  # (n, 3) world bounds
    inst_max: np.ndarray
    node_min: np.ndarray
    node_max: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_count: np.ndarray
    prim_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.blas_ids)

    @property
    def bounds(self):
        if len(self.node_min) == 0:
            return None
        return self.node_min[0].copy(), self.node_max[0].copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.blas_ids, self.rotations, self.positions, self.node_min, self.node_max,
                  self.node_left, self.node_right, self.node_count, self.prim_idx):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def instance_bounds(blas_ids, matrices, positions, table: BlasTable):
    """World AABBs of transformed BLAS root boxes."""
    rlo, rhi = table.root_bounds()
    lo = rlo[blas_ids]
    hi = rhi[blas_ids]
    c = 0.5 * (lo + hi)
    e = 0.5 * (hi - lo)
    wc = np.einsum("nij,nj->ni", matrices, c) + positions
    we = np.einsum("nij,nj->ni", np.abs(matrices), e)
    return wc - we, wc + we


def build_tlas(blas_ids, rotations, positions, table: BlasTable, owner=None) -> Tlas:
    blas_ids = np.ascontiguousarray(blas_ids, dtype=np.int32)
    n = len(blas_ids)
    rotations = np.ascontiguousarray(np.asarray(rotations, dtype=np.float64).reshape(n, 4))
    positions = np.ascontiguousarray(np.asarray(positions, dtype=np.float64).reshape(n, 3))
    if n and (blas_ids.min() < 0 or blas_ids.max() >= len(table)):
        bad = blas_ids[(blas_ids < 0) | (blas_ids >= len(table))][0]
        raise AccelError(f"unknown model type id {int(bad)}")
    mats = quat_to_matrix(rotations) if n else np.empty((0, 3, 3))
    if n:
        lo, hi = instance_bounds(blas_ids, mats, positions, table)
    else:
        lo = hi = np.empty((0, 3))
    nodes = _build_nodes(lo, hi, 0.5 * (lo + hi), TLAS_LEAF, False)
    t = Tlas(owner, blas_ids, rotations, positions, np.ascontiguousarray(mats), lo, hi, *nodes)
    _frozen(t.blas_ids, t.rotations, t.positions, t.matrices, t.node_min, t.node_max,
            t.node_left, t.node_right, t.node_count, t.prim_idx)
    return t


def build_cell_tlas(cache, table: BlasTable) -> Tlas:
    """One instance per cache record, in cache order (instance_id = record index)."""
    m, p, r = cache.records()
    return build_tlas(m, r, p, table, owner=cache.cell)


def pack_tlases(tlases) -> K.TlasArrays:
    """Concatenate several TLASes; kernels address them by position in the list."""
    tlases = list(tlases)
    node_base = np.cumsum([0] + [len(t.node_min) for t in tlases])
    inst_base = np.cumsum([0] + [len(t) for t in tlases])
    left, right, prim, root = [], [], [], []
    for n, t in enumerate(tlases):
        leaf = t.node_count > 0
        left.append(np.where(leaf, t.node_left + inst_base[n], t.node_left + node_base[n]))
        right.append(np.where(t.node_right >= 0, t.node_right + node_base[n], -1))
        prim.append(t.prim_idx + inst_base[n])
        root.append(node_base[n] if len(t.node_min) else -1)

    def cat(arrs, shape, dtype):
        arrs = [a for a in arrs if len(a)]
        return np.ascontiguousarray(np.concatenate(arrs).astype(dtype)) if arrs else np.empty((0,) + shape, dtype)

    return K.TlasArrays(
        cat([t.node_min for t in tlases], (3,), np.float64),
        cat([t.node_max for t in tlases], (3,), np.float64),
        cat(left, (), np.int32),
        cat(right, (), np.int32),
        cat([t.node_count for t in tlases], (), np.int32),
        cat(prim, (), np.int32),
        np.array(root, dtype=np.int32),
        np.asarray(inst_base[:-1], dtype=np.int32),
        cat([t.blas_ids for t in tlases], (), np.int32),
        cat([t.matrices for t in tlases], (3, 3), np.float64),
        cat([t.positions for t in tlases], (3,), np.float64),
    )


def merge_tlases(tlases, table: BlasTable, owner="merged") -> tuple[Tlas, np.ndarray]:
    """Single TLAS over all instances, concatenated in list order.

    Returns the TLAS and the per-source offsets into its instance ids.
    """
    tlases = list(tlases)
    offsets = np.cumsum([0] + [len(t) for t in tlases])
    ids = np.concatenate([t.blas_ids for t in tlases]) if tlases else np.empty(0, np.int32)
    rot = np.concatenate([t.rotations for t in tlases]) if tlases else np.empty((0, 4))
    pos = np.concatenate([t.positions for t in tlases]) if tlases else np.empty((0, 3))
    return build_tlas(ids, rot, pos, table, owner=owner), offsets


@dataclass(frozen=True)
class HitRecord:
    depth: float
    instance_id: int
    prim_id: int
    u: float = 0.0
    v: float = 0.0

    @property
    def hit(self) -> bool:
        return self.instance_id != MISS


MISS_RECORD = HitRecord(-1.0, MISS, MISS)


def _check_dirs(d):
    norms = np.linalg.norm(d, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise AccelError("ray directions must be unit length")


def trace_closest_batch(origins, dirs, pack: K.TlasArrays, table: BlasTable, which=0, t_min=0.0, t_max=np.inf):
    """Closest hits for many rays; ``which`` selects the TLAS in ``pack`` per ray.

    Returns ``(depth, instance_id, prim_id, u, v)`` arrays, depth and ids -1 on a miss.
    """
    O = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    D = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(O)
    ks = np.ascontiguousarray(np.broadcast_to(np.asarray(which, dtype=np.int32), (n,)))
    tmin = np.ascontiguousarray(np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)))
    tmax = np.ascontiguousarray(np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)))
    out_t = np.empty(n)
    out_i = np.empty(n, np.int32)
    out_p = np.empty(n, np.int32)
    out_u = np.empty(n)
    out_v = np.empty(n)
    if n:
        K.closest_batch(pack, table.pack(), ks, O, D, tmin, tmax, out_t, out_i, out_p, out_u, out_v)
    return out_t, out_i, out_p, out_u, out_v


def trace_any_batch(origins, dirs, pack: K.TlasArrays, table: BlasTable, which=0, t_min=SHADING_TMIN, t_max=np.inf):
    O = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    D = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(O)
    ks = np.ascontiguousarray(np.broadcast_to(np.asarray(which, dtype=np.int32), (n,)))
    tmin = np.ascontiguousarray(np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)))
    tmax = np.ascontiguousarray(np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)))
    out = np.empty(n, np.bool_)
    if n:
        K.any_batch(pack, table.pack(), ks, O, D, tmin, tmax, out)
    return out


def trace_closest(origin, direction, tlas: Tlas, table: BlasTable, t_min=0.0, t_max=np.inf) -> HitRecord:
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    _check_dirs(d)
    t, i, p, u, v = trace_closest_batch(origin, d, pack_tlases([tlas]), table, 0, t_min, t_max)
    if i[0] < 0:
        return MISS_RECORD
    return HitRecord(float(t[0]), int(i[0]), int(p[0]), float(u[0]), float(v[0]))


def trace_any(origin, direction, tlas: Tlas, table: BlasTable, max_t=np.inf, t_min=SHADING_TMIN) -> bool:
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    _check_dirs(d)
    return bool(trace_any_batch(origin, d, pack_tlases([tlas]), table, 0, t_min, max_t)[0])


def ray_box_interval(origins, dirs, lo, hi):
    """Entry/exit parameters of rays against one box; entry > exit means a miss."""
    O = np.asarray(origins, dtype=np.float64)
    D = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / D
        ta = (np.asarray(lo) - O) * inv
        tb = (np.asarray(hi) - O) * inv
    t0 = np.minimum(ta, tb)
    t1 = np.maximum(ta, tb)
    # axis-parallel rays: inside the slab -> unbounded, outside -> empty
    par = D == 0
    inside = (O >= lo) & (O <= hi)
    t0 = np.where(par, np.where(inside, -np.inf, np.inf), t0)
    t1 = np.where(par, np.where(inside, np.inf, -np.inf), t1)
    return t0.max(axis=1), t1.min(axis=1)

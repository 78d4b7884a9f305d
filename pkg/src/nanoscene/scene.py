"""Domain types and file I/O: molecular models, uv-mapped meshes, the scene
skeleton, cameras and the scene configuration."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import quat_to_matrix, string_key, triangle_areas, triangle_normals


class SceneError(ValueError):
    """Invalid asset, skeleton or configuration."""


class ParseError(SceneError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


@dataclass(frozen=True)
class Atom:
    position: tuple[float, float, float]
    radius: float


@dataclass(eq=False)
class MolecularModel:
    """Atom set behind one sphere BLAS. ``atom_id`` is the row index."""

    model_id: str
    positions: np.ndarray  # (n, 3) Å
    radii: np.ndarray  # (n,) Å
    color: tuple[float, float, float] = (0.7, 0.7, 0.7)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.radii = np.ascontiguousarray(self.radii, dtype=np.float64).reshape(-1)
        if len(self.radii) == 0:
            raise SceneError(f"model {self.model_id!r} has no atoms")
        if len(self.radii) != len(self.positions):
            raise SceneError(f"model {self.model_id!r}: positions/radii length mismatch")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.radii))):
            raise SceneError(f"model {self.model_id!r}: non-finite atom data")
        if np.any(self.radii <= 0):
            raise SceneError(f"model {self.model_id!r}: non-positive atom radius")
        self.positions.flags.writeable = False
        self.radii.flags.writeable = False

    @property
    def atoms(self) -> list[Atom]:
        return [Atom(tuple(p), float(r)) for p, r in zip(self.positions, self.radii)]

    def __len__(self) -> int:
        return len(self.radii)

    @property
    def bounding_radius(self) -> float:
        """Radius of the origin-centred sphere enclosing every atom."""
        return float(np.max(np.linalg.norm(self.positions, axis=1) + self.radii))

    def __eq__(self, other):
        if not isinstance(other, MolecularModel):
            return NotImplemented
        return (
            self.model_id == other.model_id
            and tuple(self.color) == tuple(other.color)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.radii, other.radii)
        )


def _default_color(model_id: str) -> tuple[float, float, float]:
    h = string_key(model_id)
    return tuple(0.35 + 0.6 * ((h >> s) & 0xFF) / 255.0 for s in (0, 8, 16))


def load_molecular_model(path, model_id: str | None = None) -> MolecularModel:
    """Read an ``x y z r`` atom list. ``# color r g b`` sets the display color."""
    path = Path(path)
    model_id = model_id or path.stem
    rows = []
    color = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                parts = text[1:].split()
                if parts and parts[0] == "color":
                    try:
                        color = tuple(float(x) for x in parts[1:4])
                    except ValueError:
                        raise ParseError(path, line_no, "bad color directive") from None
                    if len(color) != 3:
                        raise ParseError(path, line_no, "color needs three components")
                continue
            parts = text.split("#", 1)[0].split()
            if len(parts) != 4:
                raise ParseError(path, line_no, f"expected 'x y z r', got {len(parts)} fields")
            try:
                x, y, z, r = (float(p) for p in parts)
            except ValueError:
                raise ParseError(path, line_no, "non-numeric field") from None
            if not all(math.isfinite(v) for v in (x, y, z, r)):
                raise ParseError(path, line_no, "non-finite value")
            if r <= 0:
                raise ParseError(path, line_no, f"non-positive radius {r}")
            rows.append((x, y, z, r))
    if not rows:
        raise SceneError(f"{path}: model has no atoms")
    data = np.array(rows, dtype=np.float64)
    return MolecularModel(model_id, data[:, :3], data[:, 3], color or _default_color(model_id))


def write_molecular_model(model: MolecularModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# model {model.model_id}\n")
        fh.write("# color " + " ".join(repr(float(c)) for c in model.color) + "\n")
        for p, r in zip(model.positions, model.radii):
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {float(r)!r}\n")


@dataclass(frozen=True)
class Triangle:
    positions: np.ndarray  # (3, 3)
    uvs: np.ndarray  # (3, 2)
    normal: np.ndarray  # (3,)


@dataclass(eq=False)
class Mesh:
    """Indexed triangle mesh with per-corner uv indices (OBJ ``f v/vt`` layout)."""

    mesh_id: str
    vertices: np.ndarray  # (V, 3)
    uvs: np.ndarray  # (U, 2)
    faces: np.ndarray  # (F, 3) vertex indices
    face_uvs: np.ndarray  # (F, 3) uv indices

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.uvs = np.ascontiguousarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.face_uvs = np.ascontiguousarray(self.face_uvs, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) == 0:
            raise SceneError(f"mesh {self.mesh_id!r} has no triangles")
        if self.faces.shape != self.face_uvs.shape:
            raise SceneError(f"mesh {self.mesh_id!r}: every face corner needs a uv index")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise SceneError(f"mesh {self.mesh_id!r}: vertex index out of range")
        if self.face_uvs.min() < 0 or self.face_uvs.max() >= len(self.uvs):
            raise SceneError(f"mesh {self.mesh_id!r}: uv index out of range")
        used = self.uvs[np.unique(self.face_uvs)]
        if np.any(used < 0.0) or np.any(used > 1.0) or not np.all(np.isfinite(used)):
            raise SceneError(f"mesh {self.mesh_id!r}: uv coordinates must lie within [0,1]")
        areas = triangle_areas(self.tri_positions)
        if np.any(~(areas > 0)):
            bad = int(np.flatnonzero(~(areas > 0))[0])
            raise SceneError(f"mesh {self.mesh_id!r}: degenerate triangle {bad}")
        for a in (self.vertices, self.uvs, self.faces, self.face_uvs):
            a.flags.writeable = False

    @property
    def tri_positions(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def tri_uvs(self) -> np.ndarray:
        return self.uvs[self.face_uvs]

    @property
    def normals(self) -> np.ndarray:
        return triangle_normals(self.tri_positions)

    @property
    def t_big(self) -> int:
        """Index of the largest-area triangle; ties go to the lowest index."""
        return int(np.argmax(triangle_areas(self.tri_positions)))

    @property
    def triangles(self) -> list[Triangle]:
        pos, uv, nrm = self.tri_positions, self.tri_uvs, self.normals
        return [Triangle(pos[i], uv[i], nrm[i]) for i in range(len(self.faces))]

    def __len__(self) -> int:
        return len(self.faces)

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return self.mesh_id == other.mesh_id and all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.vertices, self.uvs, self.faces, self.face_uvs),
                (other.vertices, other.uvs, other.faces, other.face_uvs),
            )
        )


def load_mesh(path, mesh_id: str | None = None) -> Mesh:
    """Load the ``v``/``vt``/``f`` subset of Wavefront OBJ (polygons are fanned)."""
    path = Path(path)
    mesh_id = mesh_id or path.stem
    verts, uvs, faces, face_uvs = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "vt":
                    uvs.append([float(x) for x in parts[1:3]])
                elif tag == "f":
                    corners = []
                    for c in parts[1:]:
                        idx = c.split("/")
                        if len(idx) < 2 or not idx[1]:
                            raise SceneError(
                                f"{path}:{line_no}: face without uv coordinates; the mesh must be "
                                "uv-parameterized externally (automatic parameterization is not supported)"
                            )
                        vi, ti = int(idx[0]), int(idx[1])
                        vi = vi - 1 if vi > 0 else len(verts) + vi
                        ti = ti - 1 if ti > 0 else len(uvs) + ti
                        corners.append((vi, ti))
                    if len(corners) < 3:
                        raise ParseError(path, line_no, "face with fewer than 3 corners")
                    for k in range(1, len(corners) - 1):
                        tri = (corners[0], corners[k], corners[k + 1])
                        faces.append([c[0] for c in tri])
                        face_uvs.append([c[1] for c in tri])
            except ValueError as exc:
                if isinstance(exc, SceneError):
                    raise
                raise ParseError(path, line_no, "malformed record") from None
    if not faces:
        raise SceneError(f"{path}: no faces")
    if not uvs:
        raise SceneError(f"{path}: mesh has no uv coordinates; parameterize it externally")
    return Mesh(mesh_id, np.array(verts), np.array(uvs), np.array(faces), np.array(face_uvs))


def write_mesh(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# mesh {mesh.mesh_id}\n")
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in mesh.uvs:
            fh.write(f"vt {float(t[0])!r} {float(t[1])!r}\n")
        for f, t in zip(mesh.faces, mesh.face_uvs):
            fh.write("f " + " ".join(f"{a + 1}/{b + 1}" for a, b in zip(f, t)) + "\n")


@dataclass(frozen=True)
class MeshInstance:
    mesh_id: str
    patch_id: str
    position: tuple[float, float, float]
    rotation: tuple[float, float, float, float]  # x, y, z, w

    def __post_init__(self):
        if abs(math.sqrt(sum(c * c for c in self.rotation)) - 1.0) > 1e-6:
            raise SceneError(f"instance of {self.mesh_id!r}: rotation quaternion is not normalized")

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ quat_to_matrix(self.rotation).T + np.asarray(self.position)

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors) @ quat_to_matrix(self.rotation).T


def load_skeleton(path, mesh_ids=None, patch_ids=None) -> list[MeshInstance]:
    """Read the skeleton JSON array; resolves identifiers when id sets are given."""
    path = Path(path)
    try:
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: {exc}") from None
    if not isinstance(entries, list):
        raise SceneError(f"{path}: skeleton must be a JSON array")
    out = []
    for n, e in enumerate(entries):
        try:
            inst = MeshInstance(
                str(e["mesh_id"]),
                str(e["patch_id"]),
                tuple(float(x) for x in e["position"]),
                tuple(float(x) for x in e["rotation"]),
            )
        except (KeyError, TypeError) as exc:
            raise SceneError(f"{path}: entry {n}: missing or malformed field {exc}") from None
        except SceneError as exc:
            raise SceneError(f"{path}: entry {n}: {exc}") from None
        if len(inst.position) != 3 or len(inst.rotation) != 4:
            raise SceneError(f"{path}: entry {n}: position needs 3 and rotation 4 components")
        if mesh_ids is not None and inst.mesh_id not in mesh_ids:
            raise SceneError(f"{path}: entry {n}: unknown mesh_id {inst.mesh_id!r}")
        if patch_ids is not None and inst.patch_id not in patch_ids:
            raise SceneError(f"{path}: entry {n}: unknown patch_id {inst.patch_id!r}")
        out.append(inst)
    return out


def write_skeleton(instances, path) -> None:
    data = [
        {"mesh_id": i.mesh_id, "patch_id": i.patch_id, "position": list(i.position), "rotation": list(i.rotation)}
        for i in instances
    ]
    Path(path).write_text(json.dumps(data, indent=1), encoding="utf-8")


def compute_scene_aabb(instances, meshes) -> tuple[np.ndarray, np.ndarray]:
    """Tight box around every transformed mesh vertex of every instance."""
    if not instances:
        raise SceneError("cannot bound an empty scene")
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for inst in instances:
        pts = inst.transform(meshes[inst.mesh_id].vertices)
        lo = np.minimum(lo, pts.min(axis=0))
        hi = np.maximum(hi, pts.max(axis=0))
    return lo, hi


@dataclass
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    vertical_fov: float = 60.0
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not 0.0 < self.vertical_fov < 180.0:
            raise SceneError(f"vertical fov must lie in (0, 180), got {self.vertical_fov}")
        if self.width < 1 or self.height < 1:
            raise SceneError("image size must be positive")
        fwd = np.subtract(self.look_at, self.position)
        if np.linalg.norm(fwd) == 0:
            raise SceneError("camera look_at equals its position")
        if np.linalg.norm(np.cross(fwd, self.up)) <= 1e-9 * np.linalg.norm(fwd) * np.linalg.norm(self.up):
            raise SceneError("camera up vector is parallel to the view direction")

    def basis(self):
        fwd = np.subtract(self.look_at, self.position).astype(np.float64)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return fwd, right, up

    def rays(self):
        """Per-pixel primary rays, row-major from the top-left pixel: ``(origins, dirs)`` of shape ``(H*W, 3)``."""
        fwd, right, up = self.basis()
        tan_half = math.tan(math.radians(self.vertical_fov) * 0.5)
        aspect = self.width / self.height
        xs = (2.0 * (np.arange(self.width) + 0.5) / self.width - 1.0) * aspect * tan_half
        ys = (1.0 - 2.0 * (np.arange(self.height) + 0.5) / self.height) * tan_half
        d = fwd[None, None, :] + xs[None, :, None] * right[None, None, :] + ys[:, None, None] * up[None, None, :]
        d = d.reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(np.asarray(self.position, dtype=np.float64), d.shape).copy()
        return o, d

    @classmethod
    def from_dict(cls, d, width=None, height=None):
        return cls(
            tuple(float(x) for x in d["position"]),
            tuple(float(x) for x in d["look_at"]),
            tuple(float(x) for x in d.get("up", (0.0, 1.0, 0.0))),
            float(d.get("fov", d.get("vertical_fov", 60.0))),
            int(width if width is not None else d.get("width", 256)),
            int(height if height is not None else d.get("height", 256)),
        )

    def to_dict(self):
        return {
            "position": list(self.position),
            "look_at": list(self.look_at),
            "up": list(self.up),
            "fov": self.vertical_fov,
            "width": self.width,
            "height": self.height,
        }


@dataclass
class SceneConfig:
    grid_dim: tuple[int, int, int] | None = (200, 200, 200)
    cell_size: tuple[float, float, float] = (2000.0, 2000.0, 2000.0)
    window_radius: int = 1
    cache_capacity: int = 1_000_000
    seed: int = 0
    assets: dict = field(default_factory=dict)
    render: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.grid_dim is not None:
            self.grid_dim = tuple(int(x) for x in self.grid_dim)
            if len(self.grid_dim) != 3 or min(self.grid_dim) < 1:
                raise SceneError(f"grid_dim must be three counts >= 1, got {self.grid_dim}")
        cs = self.cell_size
        if np.isscalar(cs):
            cs = (cs, cs, cs)
        self.cell_size = tuple(float(x) for x in cs)
        if len(self.cell_size) != 3 or min(self.cell_size) <= 0:
            raise SceneError(f"cell_size must be three positive extents, got {self.cell_size}")
        if int(self.window_radius) < 0:
            raise SceneError("window_radius must be >= 0")
        if int(self.cache_capacity) < 1:
            raise SceneError("cache_capacity must be >= 1")
        self.window_radius = int(self.window_radius)
        self.cache_capacity = int(self.cache_capacity)
        self.seed = int(self.seed)

    def asset_path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @classmethod
    def from_dict(cls, d, base_dir=None):
        known = {"grid_dim", "cell_size", "window_radius", "cache_capacity", "seed", "assets", "render"}
        unknown = set(d) - known
        if unknown:
            raise SceneError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            grid_dim=d.get("grid_dim", (200, 200, 200)),
            cell_size=d.get("cell_size", (2000.0, 2000.0, 2000.0)),
            window_radius=d.get("window_radius", 1),
            cache_capacity=d.get("cache_capacity", 1_000_000),
            seed=d.get("seed", 0),
            assets=dict(d.get("assets", {})),
            render=dict(d.get("render", {})),
            base_dir=Path(base_dir) if base_dir is not None else Path(),
        )

    def to_dict(self):
        return {
            "grid_dim": list(self.grid_dim) if self.grid_dim is not None else None,
            "cell_size": list(self.cell_size),
            "window_radius": self.window_radius,
            "cache_capacity": self.cache_capacity,
            "seed": self.seed,
            "assets": self.assets,
            "render": self.render,
        }


def load_config(path) -> SceneConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: {exc}") from None
    return SceneConfig.from_dict(data, base_dir=path.parent)

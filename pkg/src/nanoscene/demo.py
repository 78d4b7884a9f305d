"""Synthetic assets and scenes for tests, validation and the fly-through demo."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import hash64, string_key
from .scene import Mesh, MolecularModel, write_mesh, write_molecular_model, write_skeleton
from .tiling import Rules


def lipid_model(model_id="lipid") -> MolecularModel:
    pos = np.array([[0.0, 1.2, 0.0], [0.5, -0.3, 0.0], [-0.5, -0.3, 0.0], [0.0, -1.4, 0.0]])
    rad = np.array([1.0, 0.8, 0.8, 0.7])
    return MolecularModel(model_id, pos, rad, (0.85, 0.75, 0.45))


def _ball(rng, n, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius * rng.random(n)[:, None] ** (1.0 / 3.0)


def protein_model(model_id="protein", n_atoms=60, seed=1) -> MolecularModel:
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0, 2 * np.pi, n_atoms)
    r = 3.5 * np.sqrt(rng.random(n_atoms))
    pos = np.stack([r * np.cos(ang), rng.uniform(-4.0, 4.0, n_atoms), r * np.sin(ang)], axis=1)
    return MolecularModel(model_id, pos, np.full(n_atoms, 1.6), (0.3, 0.55, 0.85))


def hemoglobin_model(model_id="hemoglobin", n_atoms=4380, seed=2) -> MolecularModel:
    """Four globular subunits at tetrahedral offsets; bounding radius about 20 A."""
    rng = np.random.default_rng(seed)
    centers = 7.0 * np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / np.sqrt(3.0)
    per = np.full(4, n_atoms // 4)
    per[: n_atoms % 4] += 1
    pos = np.concatenate([c + _ball(rng, k, 9.5) for c, k in zip(centers, per)])
    rad = rng.uniform(1.4, 1.9, n_atoms)
    return MolecularModel(model_id, pos, rad, (0.8, 0.15, 0.15))


# ---------------------------------------------------------------- meshes


def _subdivide(verts, faces, n):
    verts = [np.asarray(v, dtype=np.float64) for v in verts]
    faces = [tuple(f) for f in faces]
    for _ in range(n):
        mid = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in mid:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                mid[key] = len(verts) - 1
            return mid[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return np.array(verts), np.array(faces)


def _octahedral_uv(p, octant):
    """Equal-area octahedral map with +y as the upper hemisphere.

    ``octant`` signs resolve points lying on a fold so a triangle's corners are
    mapped consistently with its interior.
    """
    p = p / np.linalg.norm(p, axis=-1, keepdims=True)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    sx = np.where(x != 0, np.sign(x), octant[..., 0])
    sz = np.where(z != 0, np.sign(z), octant[..., 2])
    r = np.sqrt(np.clip(1.0 - np.abs(y), 0.0, 1.0))
    b = r * np.arctan2(np.abs(z), np.abs(x)) * (2.0 / np.pi)
    a = r - b
    upper = np.where(y != 0, y > 0, octant[..., 1] > 0)
    uu = np.where(upper, a, 1.0 - b) * sx
    vv = np.where(upper, b, 1.0 - a) * sz
    return np.clip(np.stack([uu, vv], axis=-1) * 0.5 + 0.5, 0.0, 1.0)


def geodesic_sphere(subdiv=2, radius=1.0, base="icosahedron", mesh_id="sphere") -> Mesh:
    """Subdivided platonic solid projected on a sphere, outward winding, octahedral uvs.

    With ``base="octahedron"`` every triangle lies inside one octant, so its uvs
    never straddle a fold of the octahedral map.
    """
    if base == "icosahedron":
        t = (1.0 + 5**0.5) / 2.0
        v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
        v = [np.array(x, float) / np.linalg.norm(x) for x in v]
        f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
             (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5),
             (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    elif base == "octahedron":
        v = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
        f = []
        for sx, ix in ((1, 0), (-1, 1)):
            for sy, iy in ((1, 2), (-1, 3)):
                for sz, iz in ((1, 4), (-1, 5)):
                    tri = (ix, iy, iz)
                    if sx * sy * sz < 0:
                        tri = (ix, iz, iy)
                    f.append(tri)
    else:
        raise ValueError(f"unknown base solid {base!r}")
    verts, faces = _subdivide(v, f, subdiv)
    # enforce outward winding
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, tri.mean(axis=1)) < 0
    faces[flip] = faces[flip][:, ::-1]
    tri = verts[faces]
    octant = np.sign(tri.mean(axis=1))
    uv = _octahedral_uv(tri, octant[:, None, :].repeat(3, axis=1))
    uvs = uv.reshape(-1, 2)
    face_uvs = np.arange(len(uvs)).reshape(-1, 3)
    return Mesh(mesh_id, verts * radius, uvs, faces, face_uvs)


def quad_mesh(width, height, mesh_id="quad", y=0.0, up=True) -> Mesh:
    """Rectangle in the xz plane centred on the origin; uv spans [0,1]^2 with u along x."""
    w, h = width / 2.0, height / 2.0
    verts = np.array([[-w, y, -h], [w, y, -h], [w, y, h], [-w, y, h]])
    uvs = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    faces = np.array([[0, 2, 1], [0, 3, 2]]) if up else np.array([[0, 1, 2], [0, 2, 3]])
    return Mesh(mesh_id, verts, uvs, faces, faces.copy())


def single_triangle_mesh(p0, p1, p2, uv0=(0, 0), uv1=(1, 0), uv2=(0, 1), mesh_id="tri") -> Mesh:
    verts = np.array([p0, p1, p2], dtype=np.float64)
    uvs = np.array([uv0, uv1, uv2], dtype=np.float64)
    faces = np.array([[0, 1, 2]])
    return Mesh(mesh_id, verts, uvs, faces, faces.copy())


# ---------------------------------------------------------------- rules


def membrane_rules(count=5000, tile=500.0, protein_weight=0.03, **kw) -> Rules:
    models = [("lipid", 1.0 - protein_weight)] + ([("protein", protein_weight)] if protein_weight > 0 else [])
    return Rules(models, count / (tile * tile), (tile, tile), **kw)


def box_rules(count=5000, box=1000.0, variants=2, **kw) -> Rules:
    return Rules([("hemoglobin", 1.0)], count / box**3, (box, box, box), variants=variants, **kw)


# ---------------------------------------------------------------- scene directories


def write_virion_scene(out_dir, *, radius=4000.0, subdiv=4, cell=2000.0, membrane_count=5000, tile=500.0,
                       box_count=5000, box=1000.0, frames=10, width=256, height=256, seed=7, ao_rays=4,
                       atlas_resolution=64) -> Path:
    """Directory with assets, bake rules, skeleton, config and a straight fly-through path.

    The camera starts outside the virion and flies one cell per frame along +x
    towards its centre, crossing the membrane.
    """
    out = Path(out_dir)
    (out / "assets").mkdir(parents=True, exist_ok=True)
    write_molecular_model(lipid_model(), out / "assets" / "lipid.xyzr")
    write_molecular_model(protein_model(), out / "assets" / "protein.xyzr")
    write_molecular_model(hemoglobin_model(), out / "assets" / "hemoglobin.xyzr")
    write_mesh(geodesic_sphere(subdiv, radius, base="octahedron", mesh_id="virion"), out / "assets" / "virion.obj")
    (out / "assets" / "membrane.rules.json").write_text(json.dumps(membrane_rules(membrane_count, tile).to_dict(), indent=1))
    (out / "assets" / "box.rules.json").write_text(json.dumps(box_rules(box_count, box).to_dict(), indent=1))
    from .scene import MeshInstance

    write_skeleton([MeshInstance("virion", "envelope", (0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 1.0))], out / "skeleton.json")
    half = int(np.ceil((radius + 2 * cell) / cell)) + frames
    config = {
        "grid_dim": [2 * half] * 3,
        "cell_size": [cell] * 3,
        "window_radius": 1,
        "cache_capacity": 1_000_000,
        "seed": seed,
        "assets": {
            "models": {"lipid": "assets/lipid.xyzr", "protein": "assets/protein.xyzr",
                       "hemoglobin": "assets/hemoglobin.xyzr"},
            "meshes": {"virion": "assets/virion.obj"},
            "skeleton": "skeleton.json",
            "tilesets": {"envelope": "baked/envelope.tiles"},
            "atlases": {"envelope": "baked/envelope.atlas"},
            "rules": {"envelope": ["assets/membrane.rules.json", "assets/box.rules.json"]},
        },
        "render": {"width": width, "height": height, "ao_rays": ao_rays, "atlas_resolution": atlas_resolution},
    }
    (out / "scene.json").write_text(json.dumps(config, indent=1))
    start = radius + (frames // 2) * cell
    path = []
    for f in range(frames):
        x = start - f * cell
        path.append({"position": [x, 0.3 * cell, 0.2 * cell],
                     "look_at": [x - cell, 0.3 * cell, 0.2 * cell], "up": [0.0, 1.0, 0.0], "fov": 60.0})
    (out / "camera_path.json").write_text(json.dumps(path, indent=1))
    return out


def scene_seed(name: str, seed: int) -> int:
    return hash64(seed, string_key(name))

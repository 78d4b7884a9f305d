"""Small vector, quaternion and intersection helpers shared by the other modules.

Quaternions are stored as ``(x, y, z, w)``. All helpers accept either a single
quaternion of shape ``(4,)`` or a stack of shape ``(n, 4)``.
"""
from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])

_MASK64 = (1 << 64) - 1


def hash64(*values: int) -> int:
    """Deterministic 64-bit mix of a sequence of integers (splitmix64 chain)."""
    h = 0x9E3779B97F4A7C15
    for v in values:
        h = (h ^ (int(v) & _MASK64)) & _MASK64
        h = (h + 0x9E3779B97F4A7C15) & _MASK64
        z = h
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        h = z ^ (z >> 31)
    return h


def string_key(s: str) -> int:
    """Stable integer key for a string (not Python's salted ``hash``)."""
    return hash64(*s.encode("utf-8"), len(s))


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax, ay, az, aw = np.moveaxis(a, -1, 0)
    bx, by, bz, bw = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_to_matrix(q):
    """Rotation matrix for (normalized copies of) the given quaternion(s)."""
    q = quat_normalize(q)
    x, y, z, w = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - z * w)
    m[..., 0, 2] = 2 * (x * z + y * w)
    m[..., 1, 0] = 2 * (x * y + z * w)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - x * w)
    m[..., 2, 0] = 2 * (x * z - y * w)
    m[..., 2, 1] = 2 * (y * z + x * w)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m):
    """Quaternion(s) for proper rotation matrix/matrices (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, r in enumerate(flat):
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            out[n] = [(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s, 0.25 * s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            out[n] = [0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s, (r[2, 1] - r[1, 2]) / s]
        elif r[1, 1] > r[2, 2]:
            s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            out[n] = [(r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s, (r[0, 2] - r[2, 0]) / s]
        else:
            s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            out[n] = [(r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s, (r[1, 0] - r[0, 1]) / s]
    out = quat_normalize(out)
    return out.reshape(m.shape[:-2] + (4,))


def quat_rotate(q, v):
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), np.asarray(v, dtype=np.float64))


def quat_about_axis(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * np.asarray(angle, dtype=np.float64)
    s = np.sin(half)[..., None]
    return np.concatenate([axis * s, np.cos(half)[..., None]], axis=-1)


def normalize(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def triangle_normals(tri):
    """Unit geometric normals of triangles ``(n, 3, 3)`` from the winding order."""
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def triangle_areas(tri):
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def closest_point_on_triangles(p, tri):
    """Closest points on triangles ``tri (m,3,3)`` to points ``p (n,3)``.

    Returns an ``(n, m, 3)`` array. Region-based method from Ericson,
    *Real-Time Collision Detection* 5.1.5, vectorised over both axes.
    """
    p = np.asarray(p, dtype=np.float64)[:, None, :]
    a = tri[None, :, 0]
    b = tri[None, :, 1]
    c = tri[None, :, 2]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.sum(ab * ap, axis=-1)
    d2 = np.sum(ac * ap, axis=-1)
    bp = p - b
    d3 = np.sum(ab * bp, axis=-1)
    d4 = np.sum(ac * bp, axis=-1)
    cp = p - c
    d5 = np.sum(ab * cp, axis=-1)
    d6 = np.sum(ac * cp, axis=-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    shape = np.broadcast_shapes(p.shape, a.shape)
    out = np.empty(shape)
    done = np.zeros(shape[:-1], dtype=bool)

    def assign(mask, value):
        nonlocal done
        m = mask & ~done
        if np.any(m):
            out[m] = np.broadcast_to(value, shape)[m]
            done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[..., None] * ab)
        assign((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[..., None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[..., None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        assign(np.ones(shape[:-1], dtype=bool), a + ab * v[..., None] + ac * w[..., None])
    return out


def point_triangle_distance(p, tri):
    """Euclidean distances ``(n, m)`` from points to triangles."""
    q = closest_point_on_triangles(p, tri)
    return np.linalg.norm(q - np.asarray(p, dtype=np.float64)[:, None, :], axis=-1)


def triangles_overlap_box(tri, box_min, box_max):
    """Separating-axis triangle/box overlap test, vectorised over triangles.

    The box is half-open on its upper faces: a triangle touching only the
    ``box_max`` plane of an axis does not overlap, one touching only
    ``box_min`` does. This matches the floor convention of cell indexing.
    """
    tri = np.asarray(tri, dtype=np.float64)
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    tmin = tri.min(axis=1)
    tmax = tri.max(axis=1)
    ok = np.all((tmax >= box_min) & (tmin < box_max), axis=1)
    if not np.any(ok):
        return ok
    center = 0.5 * (box_min + box_max)
    half = 0.5 * (box_max - box_min)
    v = tri - center
    e = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]], axis=1)
    axes = np.eye(3)
    for i in range(3):
        for j in range(3):
            a = np.cross(axes[i], e[:, j])
            p = np.einsum("nk,nvk->nv", a, v)
            r = np.abs(a) @ half
            ok &= ~((p.min(axis=1) > r) | (p.max(axis=1) < -r))
    n = np.cross(e[:, 0], e[:, 1])
    d = np.einsum("nk,nk->n", n, v[:, 0])
    r = np.abs(n) @ half
    ok &= np.abs(d) <= r
    return ok


def box_sphere_overlap(box_min, box_max, center, radius) -> bool:
    q = np.clip(center, box_min, box_max)
    return float(np.sum((q - center) ** 2)) <= radius * radius

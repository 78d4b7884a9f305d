"""Compiled BVH build/traversal kernels.

Node layout shared by bottom- and top-level hierarchies: ``node_left`` is the
left child of an inner node or the first ``prim_idx`` slot of a leaf,
``node_right`` the right child (or -1), ``node_count`` the leaf primitive count
(0 for inner nodes).
"""
from __future__ import annotations

import math
import os
from collections import namedtuple

import numba
import numpy as np
from numba import njit, prange

BlasArrays = namedtuple(
    "BlasArrays",
    "node_min node_max node_left node_right node_count prim_idx root kind prim_base spheres tris",
)
TlasArrays = namedtuple(
    "TlasArrays",
    "node_min node_max node_left node_right node_count prim_idx root inst_base inst_blas inst_rot inst_pos",
)

SPHERES = 0
TRIANGLES = 1
STACK_SIZE = 512

if "NUMBA_THREADING_LAYER" not in os.environ:
    # always-available pool; avoids probing an outdated system TBB
    numba.config.THREADING_LAYER = "workqueue"

_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def configure_threads() -> None:
    """Honour ``NANOSCENE_THREADS`` (0 or unset = all hardware threads)."""
    n = int(os.environ.get("NANOSCENE_THREADS", "0") or 0)
    limit = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(limit if n <= 0 else min(n, limit))


# ---------------------------------------------------------------- build


@njit(cache=True)
def build_bvh(lo, hi, cent, max_leaf, use_sah, nbins):
    n = lo.shape[0]
    order = np.arange(n).astype(np.int32)
    cap = max(1, 2 * n - 1)
    nmin = np.empty((cap, 3))
    nmax = np.empty((cap, 3))
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    count = np.zeros(cap, np.int32)
    if n == 0:
        return nmin[:0], nmax[:0], left[:0], right[:0], count[:0], order

    st_node = np.empty(cap, np.int32)
    st_s = np.empty(cap, np.int32)
    st_e = np.empty(cap, np.int32)
    tmp = np.empty(n, np.int32)
    keys = np.empty(n)
    bin_cnt = np.zeros(nbins, np.int64)
    bin_lo = np.empty((nbins, 3))
    bin_hi = np.empty((nbins, 3))
    r_area = np.zeros(nbins)
    r_cnt = np.zeros(nbins, np.int64)
    bl = np.empty(3)
    bh = np.empty(3)
    cl = np.empty(3)
    ch = np.empty(3)
    al = np.empty(3)
    ah = np.empty(3)

    st_node[0] = 0
    st_s[0] = 0
    st_e[0] = n
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        s = st_s[sp]
        e = st_e[sp]
        for a in range(3):
            bl[a] = np.inf
            bh[a] = -np.inf
            cl[a] = np.inf
            ch[a] = -np.inf
        for q in range(s, e):
            p = order[q]
            for a in range(3):
                if lo[p, a] < bl[a]:
                    bl[a] = lo[p, a]
                if hi[p, a] > bh[a]:
                    bh[a] = hi[p, a]
                if cent[p, a] < cl[a]:
                    cl[a] = cent[p, a]
                if cent[p, a] > ch[a]:
                    ch[a] = cent[p, a]
        for a in range(3):
            nmin[node, a] = bl[a]
            nmax[node, a] = bh[a]
        cnt = e - s
        if cnt <= max_leaf:
            left[node] = s
            right[node] = -1
            count[node] = cnt
            continue

        mid = -1
        if use_sah:
            best_cost = np.inf
            best_axis = -1
            best_split = -1
            for a in range(3):
                ext = ch[a] - cl[a]
                if ext <= 0.0:
                    continue
                for b in range(nbins):
                    bin_cnt[b] = 0
                    for c in range(3):
                        bin_lo[b, c] = np.inf
                        bin_hi[b, c] = -np.inf
                for q in range(s, e):
                    p = order[q]
                    b = int((cent[p, a] - cl[a]) / ext * nbins)
                    if b >= nbins:
                        b = nbins - 1
                    bin_cnt[b] += 1
                    for c in range(3):
                        if lo[p, c] < bin_lo[b, c]:
                            bin_lo[b, c] = lo[p, c]
                        if hi[p, c] > bin_hi[b, c]:
                            bin_hi[b, c] = hi[p, c]
                # right-to-left sweep
                acc = 0
                for c in range(3):
                    al[c] = np.inf
                    ah[c] = -np.inf
                for b in range(nbins - 1, 0, -1):
                    acc += bin_cnt[b]
                    for c in range(3):
                        if bin_lo[b, c] < al[c]:
                            al[c] = bin_lo[b, c]
                        if bin_hi[b, c] > ah[c]:
                            ah[c] = bin_hi[b, c]
                    r_cnt[b] = acc
                    if acc > 0:
                        dx = ah[0] - al[0]
                        dy = ah[1] - al[1]
                        dz = ah[2] - al[2]
                        r_area[b] = dx * dy + dy * dz + dz * dx
                    else:
                        r_area[b] = 0.0
                acc = 0
                for c in range(3):
                    al[c] = np.inf
                    ah[c] = -np.inf
                for b in range(nbins - 1):
                    acc += bin_cnt[b]
                    for c in range(3):
                        if bin_lo[b, c] < al[c]:
                            al[c] = bin_lo[b, c]
                        if bin_hi[b, c] > ah[c]:
                            ah[c] = bin_hi[b, c]
                    nr = r_cnt[b + 1]
                    if acc > 0 and nr > 0:
                        dx = ah[0] - al[0]
                        dy = ah[1] - al[1]
                        dz = ah[2] - al[2]
                        cost = (dx * dy + dy * dz + dz * dx) * acc + r_area[b + 1] * nr
                        if cost < best_cost:
                            best_cost = cost
                            best_axis = a
                            best_split = b + 1
            if best_axis >= 0:
                a = best_axis
                ext = ch[a] - cl[a]
                nl = 0
                for q in range(s, e):
                    p = order[q]
                    b = int((cent[p, a] - cl[a]) / ext * nbins)
                    if b >= nbins:
                        b = nbins - 1
                    if b < best_split:
                        tmp[nl] = p
                        nl += 1
                m = nl
                for q in range(s, e):
                    p = order[q]
                    b = int((cent[p, a] - cl[a]) / ext * nbins)
                    if b >= nbins:
                        b = nbins - 1
                    if b >= best_split:
                        tmp[m] = p
                        m += 1
                for q in range(cnt):
                    order[s + q] = tmp[q]
                mid = s + nl
        if mid < 0:
            a = 0
            for c in range(1, 3):
                if ch[c] - cl[c] > ch[a] - cl[a]:
                    a = c
            if ch[a] - cl[a] > 0.0:
                for q in range(cnt):
                    keys[q] = cent[order[s + q], a]
                perm = np.argsort(keys[:cnt], kind="mergesort")
                for q in range(cnt):
                    tmp[q] = order[s + perm[q]]
                for q in range(cnt):
                    order[s + q] = tmp[q]
            mid = s + cnt // 2
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        count[node] = 0
        st_node[sp] = lc
        st_s[sp] = s
        st_e[sp] = mid
        sp += 1
        st_node[sp] = rc
        st_s[sp] = mid
        st_e[sp] = e
        sp += 1
    return nmin[:n_nodes], nmax[:n_nodes], left[:n_nodes], right[:n_nodes], count[:n_nodes], order


# ---------------------------------------------------------------- primitives


@njit(cache=True, inline="always")
def _slab(nmin, nmax, node, ox, oy, oz, dx, dy, dz, ix, iy, iz, t0, t1):
    """Entry parameter of the ray against a node box within [t0, t1], or inf."""
    if dx != 0.0:
        ta = (nmin[node, 0] - ox) * ix
        tb = (nmax[node, 0] - ox) * ix
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif ox < nmin[node, 0] or ox > nmax[node, 0]:
        return np.inf
    if dy != 0.0:
        ta = (nmin[node, 1] - oy) * iy
        tb = (nmax[node, 1] - oy) * iy
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif oy < nmin[node, 1] or oy > nmax[node, 1]:
        return np.inf
    if dz != 0.0:
        ta = (nmin[node, 2] - oz) * iz
        tb = (nmax[node, 2] - oz) * iz
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    elif oz < nmin[node, 2] or oz > nmax[node, 2]:
        return np.inf
    if t0 <= t1:
        return t0
    return np.inf


@njit(cache=True, inline="always")
def sphere_hit(cx, cy, cz, r, ox, oy, oz, dx, dy, dz, tmin):
    """Smallest root above ``tmin`` for a unit-direction ray, else inf.

    Uses the projected-discriminant form and the sign-aware quadratic root
    pair so that neither root suffers cancellation.
    """
    fx = ox - cx
    fy = oy - cy
    fz = oz - cz
    b = fx * dx + fy * dy + fz * dz
    gx = fx - b * dx
    gy = fy - b * dy
    gz = fz - b * dz
    disc = r * r - (gx * gx + gy * gy + gz * gz)
    if disc < 0.0:
        return np.inf
    c = fx * fx + fy * fy + fz * fz - r * r
    sq = math.sqrt(disc)
    if b >= 0.0:
        q = -b - sq
    else:
        q = -b + sq
    if q == 0.0:
        return np.inf if 0.0 <= tmin else 0.0
    t0 = c / q
    t1 = q
    if t0 > t1:
        t0, t1 = t1, t0
    if t0 > tmin:
        return t0
    if t1 > tmin:
        return t1
    return np.inf


@njit(cache=True, inline="always")
def triangle_hit(tri, g, ox, oy, oz, dx, dy, dz, tmin):
    """Moller-Trumbore; returns ``(t, u, v)`` with t = inf on a miss."""
    v0x = tri[g, 0, 0]
    v0y = tri[g, 0, 1]
    v0z = tri[g, 0, 2]
    e1x = tri[g, 1, 0] - v0x
    e1y = tri[g, 1, 1] - v0y
    e1z = tri[g, 1, 2] - v0z
    e2x = tri[g, 2, 0] - v0x
    e2y = tri[g, 2, 1] - v0y
    e2z = tri[g, 2, 2] - v0z
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det == 0.0:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    sx = ox - v0x
    sy = oy - v0y
    sz = oz - v0z
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t > tmin:
        return t, u, v
    return np.inf, 0.0, 0.0


@njit(cache=True, inline="always")
def _inv(d):
    if d != 0.0:
        return 1.0 / d
    return np.inf


# ---------------------------------------------------------------- bottom level


@njit(cache=True)
def blas_closest(B, b, ox, oy, oz, dx, dy, dz, tmin, tmax, st_node, st_t):
    """Closest primitive of BLAS ``b`` with t in (tmin, tmax]; ties -> lowest id."""
    best_t = tmax
    best_p = -1
    best_u = 0.0
    best_v = 0.0
    root = B.root[b]
    kind = B.kind[b]
    base = B.prim_base[b]
    ix = _inv(dx)
    iy = _inv(dy)
    iz = _inv(dz)
    tn = _slab(B.node_min, B.node_max, root, ox, oy, oz, dx, dy, dz, ix, iy, iz, tmin, best_t)
    if tn == np.inf:
        return best_t, best_p, best_u, best_v
    sp = 0
    st_node[0] = root
    st_t[0] = tn
    sp = 1
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        if st_t[sp] > best_t:
            continue
        cnt = B.node_count[node]
        if cnt > 0:
            first = B.node_left[node]
            for q in range(first, first + cnt):
                p = B.prim_idx[q]
                g = base + p
                u = 0.0
                v = 0.0
                if kind == SPHERES:
                    t = sphere_hit(
                        B.spheres[g, 0], B.spheres[g, 1], B.spheres[g, 2], B.spheres[g, 3],
                        ox, oy, oz, dx, dy, dz, tmin,
                    )
                else:
                    t, u, v = triangle_hit(B.tris, g, ox, oy, oz, dx, dy, dz, tmin)
                if t < best_t or (t == best_t and t != np.inf and (best_p < 0 or p < best_p)):
                    best_t = t
                    best_p = p
                    best_u = u
                    best_v = v
        else:
            lc = B.node_left[node]
            rc = B.node_right[node]
            tl = _slab(B.node_min, B.node_max, lc, ox, oy, oz, dx, dy, dz, ix, iy, iz, tmin, best_t)
            tr = _slab(B.node_min, B.node_max, rc, ox, oy, oz, dx, dy, dz, ix, iy, iz, tmin, best_t)
            if tl <= tr:
                if tr != np.inf:
                    st_node[sp] = rc
                    st_t[sp] = tr
                    sp += 1
                if tl != np.inf:
                    st_node[sp] = lc
                    st_t[sp] = tl
                    sp += 1
            else:
                if tl != np.inf:
                    st_node[sp] = lc
                    st_t[sp] = tl
                    sp += 1
                st_node[sp] = rc
                st_t[sp] = tr
                sp += 1
    return best_t, best_p, best_u, best_v


@njit(cache=True)
def blas_any(B, b, ox, oy, oz, dx, dy, dz, tmin, tmax, st_node):
    root = B.root[b]
    kind = B.kind[b]
    base = B.prim_base[b]
    ix = _inv(dx)
    iy = _inv(dy)
    iz = _inv(dz)
    st_node[0] = root
    sp = 1
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        if _slab(B.node_min, B.node_max, node, ox, oy, oz, dx, dy, dz, ix, iy, iz, tmin, tmax) == np.inf:
            continue
        cnt = B.node_count[node]
        if cnt > 0:
            first = B.node_left[node]
            for q in range(first, first + cnt):
                g = base + B.prim_idx[q]
                if kind == SPHERES:
                    t = sphere_hit(
                        B.spheres[g, 0], B.spheres[g, 1], B.spheres[g, 2], B.spheres[g, 3],
                        ox, oy, oz, dx, dy, dz, tmin,
                    )
                else:
                    t, u, v = triangle_hit(B.tris, g, ox, oy, oz, dx, dy, dz, tmin)
                if t < tmax:
                    return True
        else:
            st_node[sp] = B.node_left[node]
            sp += 1
            st_node[sp] = B.node_right[node]
            sp += 1
    return False


# ---------------------------------------------------------------- top level


@njit(cache=True, inline="always")
def _to_instance(T, inst, ox, oy, oz, dx, dy, dz):
    # R^T (o - p), R^T d for a rigid instance transform
    rx = ox - T.inst_pos[inst, 0]
    ry = oy - T.inst_pos[inst, 1]
    rz = oz - T.inst_pos[inst, 2]
    R = T.inst_rot
    lox = R[inst, 0, 0] * rx + R[inst, 1, 0] * ry + R[inst, 2, 0] * rz
    loy = R[inst, 0, 1] * rx + R[inst, 1, 1] * ry + R[inst, 2, 1] * rz
    loz = R[inst, 0, 2] * rx + R[inst, 1, 2] * ry + R[inst, 2, 2] * rz
    ldx = R[inst, 0, 0] * dx + R[inst, 1, 0] * dy + R[inst, 2, 0] * dz
    ldy = R[inst, 0, 1] * dx + R[inst, 1, 1] * dy + R[inst, 2, 1] * dz
    ldz = R[inst, 0, 2] * dx + R[inst, 1, 2] * dy + R[inst, 2, 2] * dz
    return lox, loy, loz, ldx, ldy, ldz


@njit(cache=True)
def tlas_closest(T, B, k, ox, oy, oz, dx, dy, dz, tmin, tmax, st_node, st_t, bst_node, bst_t):
    """Closest hit in TLAS ``k``: ``(t, local instance id, prim id, u, v)``; ids -1 on a miss.

    Equal depths resolve to the lowest ``(instance, primitive)`` pair.
    """
    best_t = tmax
    best_i = -1
    best_p = -1
    best_u = 0.0
    best_v = 0.0
    root = T.root[k]
    if root < 0:
        return best_t, best_i, best_p, best_u, best_v
    base = T.inst_base[k]
    ix = _inv(dx)
    iy = _inv(dy)
    iz = _inv(dz)
    tn = _slab(T.node_min, T.node_max, root, ox, oy, oz, dx, dy, dz, ix, iy, iz, tmin, best_t)
    if tn == np.inf:
        return best_t, best_i, best_p, best_u, best_v
    st_node[0] = root
    st_t[0] = tn
    sp = 1
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        if st_t[sp] > best_t:
            continue
        cnt = T.node_count[node]
        if cnt > 0:
            first = T.node_left[node]
            for q in range(first, first + cnt):
                inst = T.prim_idx[q]
                lox, loy, loz, ldx, ldy, ldz = _to_instance(T, inst, ox, oy, oz, dx, dy, dz)
                t, p, u, v = blas_closest(B, T.inst_blas[inst], lox, loy, loz, ldx, ldy, ldz, tmin, best_t, bst_node, bst_t)
                if p >= 0:
                    li = inst - base
                    if best_i < 0 or t < best_t or (t == best_t and (li < best_i or (li == best_i and p < best_p))):
                        best_t = t
                        best_i = li
                        best_p = p
                        best_u = u
                        best_v = v
        else:
            lc = T.node_left[node]
            rc = T.node_right[node]
            tl = _slab(T.node_min, T.node_max, lc, ox, oy, oz, dx, dy, dz, ix, iy, iz, tmin, best_t)
            tr = _slab(T.node_min, T.node_max, rc, ox, oy, oz, dx, dy, dz, ix, iy, iz, tmin, best_t)
            if tl <= tr:
                if tr != np.inf:
                    st_node[sp] = rc
                    st_t[sp] = tr
                    sp += 1
                if tl != np.inf:
                    st_node[sp] = lc
                    st_t[sp] = tl
                    sp += 1
            else:
                if tl != np.inf:
                    st_node[sp] = lc
                    st_t[sp] = tl
                    sp += 1
                st_node[sp] = rc
                st_t[sp] = tr
                sp += 1
    return best_t, best_i, best_p, best_u, best_v


@njit(cache=True)
def tlas_any(T, B, k, ox, oy, oz, dx, dy, dz, tmin, tmax, st_node, bst_node):
    root = T.root[k]
    if root < 0:
        return False
    ix = _inv(dx)
    iy = _inv(dy)
    iz = _inv(dz)
    st_node[0] = root
    sp = 1
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        if _slab(T.node_min, T.node_max, node, ox, oy, oz, dx, dy, dz, ix, iy, iz, tmin, tmax) == np.inf:
            continue
        cnt = T.node_count[node]
        if cnt > 0:
            first = T.node_left[node]
            for q in range(first, first + cnt):
                inst = T.prim_idx[q]
                lox, loy, loz, ldx, ldy, ldz = _to_instance(T, inst, ox, oy, oz, dx, dy, dz)
                if blas_any(B, T.inst_blas[inst], lox, loy, loz, ldx, ldy, ldz, tmin, tmax, bst_node):
                    return True
        else:
            st_node[sp] = T.node_left[node]
            sp += 1
            st_node[sp] = T.node_right[node]
            sp += 1
    return False


# ---------------------------------------------------------------- batches


@njit(cache=True, parallel=True)
def closest_batch(T, B, ks, O, D, tmin, tmax, out_t, out_i, out_p, out_u, out_v):
    n = O.shape[0]
    for r in prange(n):
        st_node = np.empty(STACK_SIZE, np.int32)
        st_t = np.empty(STACK_SIZE)
        bst_node = np.empty(STACK_SIZE, np.int32)
        bst_t = np.empty(STACK_SIZE)
        t, i, p, u, v = tlas_closest(
            T, B, ks[r], O[r, 0], O[r, 1], O[r, 2], D[r, 0], D[r, 1], D[r, 2],
            tmin[r], tmax[r], st_node, st_t, bst_node, bst_t,
        )
        if i < 0:
            out_t[r] = -1.0
        else:
            out_t[r] = t
        out_i[r] = i
        out_p[r] = p
        out_u[r] = u
        out_v[r] = v


@njit(cache=True, parallel=True)
def any_batch(T, B, ks, O, D, tmin, tmax, out):
    n = O.shape[0]
    for r in prange(n):
        st_node = np.empty(STACK_SIZE, np.int32)
        bst_node = np.empty(STACK_SIZE, np.int32)
        out[r] = tlas_any(T, B, ks[r], O[r, 0], O[r, 1], O[r, 2], D[r, 0], D[r, 1], D[r, 2], tmin[r], tmax[r], st_node, bst_node)


# ---------------------------------------------------------------- sampling


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def uniform2(seed, key, j):
    h = _mix(seed ^ _mix(np.uint64(key) * _GOLDEN + np.uint64(j)))
    a = _mix(h + _GOLDEN)
    b = _mix(a + _GOLDEN)
    return (a >> np.uint64(11)) * (1.0 / 9007199254740992.0), (b >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True, inline="always")
def cosine_dir(nx, ny, nz, u1, u2):
    # Duff et al. branchless orthonormal basis
    s = 1.0 if nz >= 0.0 else -1.0
    a = -1.0 / (s + nz)
    b = nx * ny * a
    tx = 1.0 + s * nx * nx * a
    ty = s * b
    tz = -s * nx
    bx = b
    by = s + ny * ny * a
    bz = -ny
    r = math.sqrt(u1)
    phi = 2.0 * math.pi * u2
    x = r * math.cos(phi)
    y = r * math.sin(phi)
    z = math.sqrt(max(0.0, 1.0 - u1))
    dx = x * tx + y * bx + z * nx
    dy = x * ty + y * by + z * ny
    dz = x * tz + y * bz + z * nz
    inv = 1.0 / math.sqrt(dx * dx + dy * dy + dz * dz)
    return dx * inv, dy * inv, dz * inv


@njit(cache=True, parallel=True)
def ao_batch(T, B, P, N, owner, centers, radii, cell_lo, cell_hi, n_rays, max_dist, tmin, seed, keys, border_fix, out):
    """Unoccluded fraction of cosine-weighted rays per hit point.

    With ``border_fix`` a hit whose atom leaves the owning cell box traces
    against every structure whose cell box the atom touches.
    """
    n = P.shape[0]
    K = cell_lo.shape[0]
    for i in prange(n):
        if n_rays <= 0:
            out[i] = 1.0
            continue
        st_node = np.empty(STACK_SIZE, np.int32)
        bst_node = np.empty(STACK_SIZE, np.int32)
        ks = np.empty(K, np.int32)
        k0 = owner[i]
        nk = 1
        ks[0] = k0
        if border_fix:
            c0 = centers[i, 0]
            c1 = centers[i, 1]
            c2 = centers[i, 2]
            r = radii[i]
            crosses = (
                c0 - r < cell_lo[k0, 0] or c1 - r < cell_lo[k0, 1] or c2 - r < cell_lo[k0, 2]
                or c0 + r > cell_hi[k0, 0] or c1 + r > cell_hi[k0, 1] or c2 + r > cell_hi[k0, 2]
            )
            if crosses:
                for k in range(K):
                    if k == k0:
                        continue
                    d2 = 0.0
                    for a in range(3):
                        c = centers[i, a]
                        q = min(max(c, cell_lo[k, a]), cell_hi[k, a])
                        d2 += (q - c) * (q - c)
                    if d2 <= r * r:
                        ks[nk] = k
                        nk += 1
        free = 0
        for j in range(n_rays):
            u1, u2 = uniform2(seed, keys[i], j)
            dx, dy, dz = cosine_dir(N[i, 0], N[i, 1], N[i, 2], u1, u2)
            hit = False
            for m in range(nk):
                if tlas_any(T, B, ks[m], P[i, 0], P[i, 1], P[i, 2], dx, dy, dz, tmin, max_dist, st_node, bst_node):
                    hit = True
                    break
            if not hit:
                free += 1
        out[i] = free / n_rays


@njit(cache=True)
def ao_directions(N, n_rays, seed, keys):
    """The ray directions ``ao_batch`` uses, for inspection and tests."""
    n = N.shape[0]
    out = np.empty((n, n_rays, 3))
    for i in range(n):
        for j in range(n_rays):
            u1, u2 = uniform2(seed, keys[i], j)
            dx, dy, dz = cosine_dir(N[i, 0], N[i, 1], N[i, 2], u1, u2)
            out[i, j, 0] = dx
            out[i, j, 1] = dy
            out[i, j, 2] = dz
    return out


# ---------------------------------------------------------------- nearest triangle


@njit(cache=True, inline="always")
def _closest_on_triangle(px, py, pz, tri, g):
    # Ericson, Real-Time Collision Detection 5.1.5
    ax, ay, az = tri[g, 0, 0], tri[g, 0, 1], tri[g, 0, 2]
    bx, by, bz = tri[g, 1, 0], tri[g, 1, 1], tri[g, 1, 2]
    cx, cy, cz = tri[g, 2, 0], tri[g, 2, 1], tri[g, 2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@njit(cache=True, parallel=True)
def nearest_triangle(points, tris):
    """Index of and squared distance to the nearest triangle per point (ties -> lowest index)."""
    n = points.shape[0]
    m = tris.shape[0]
    idx = np.full(n, -1, np.int64)
    dist = np.full(n, np.inf)
    for i in prange(n):
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        best = np.inf
        bi = -1
        for g in range(m):
            qx, qy, qz = _closest_on_triangle(px, py, pz, tris, g)
            d2 = (qx - px) ** 2 + (qy - py) ** 2 + (qz - pz) ** 2
            if d2 < best:
                best = d2
                bi = g
        idx[i] = bi
        dist[i] = best
    return idx, dist

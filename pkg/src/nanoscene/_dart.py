"""Compiled dart throwing for collision-free instance placement."""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def throw_darts(lo_q, span_q, quant, scale, fixed_pos, fixed_rad, target, radii, cumw, seed, max_attempts, periodic):
    """Place up to ``target`` instances inside a box region.

    Coordinates are normalized (world = coord * scale) and proposals are
    integer multiples of ``1 / quant`` starting at ``lo_q / quant``. Two
    instances collide when their world distance is below the sum of their
    radii; ``fixed_pos``/``fixed_rad`` are obstacles placed beforehand. With
    ``periodic`` the unit cube wraps around (minimum image distances).
    Returns ``(positions, model_index)`` of the accepted instances.
    """
    np.random.seed(seed)
    D = 3
    F = fixed_pos.shape[0]
    rmax = 0.0
    for r in radii:
        rmax = max(rmax, r)
    for r in fixed_rad:
        rmax = max(rmax, r)
    cap = F + target
    pos = np.empty((cap, D))
    rad = np.empty(cap)
    model = np.full(cap, -1, np.int32)
    out_pos = np.empty((target, D))
    out_model = np.empty(target, np.int32)
    if target == 0 or rmax <= 0.0:
        return out_pos[:0], out_model[:0]

    glo = np.empty(D)
    cw = np.empty(D)
    nc = np.empty(D, np.int64)
    for a in range(D):
        w = 2.0 * rmax / scale[a]
        if periodic:
            n = int(math.floor(1.0 / w)) if w > 0 else 1
            if n < 3:
                n = 1
            nc[a] = n
            cw[a] = 1.0 / n
            glo[a] = 0.0
        else:
            lo = lo_q[a] / quant - w
            hi = (lo_q[a] + span_q[a]) / quant + w
            n = max(1, int(math.ceil((hi - lo) / w)))
            nc[a] = n
            cw[a] = w
            glo[a] = lo
    head = np.full(nc[0] * nc[1] * nc[2], -1, np.int64)
    nxt = np.full(cap, -1, np.int64)
    count = 0

    ci = np.empty(D, np.int64)
    for f in range(F):
        inside = True
        for a in range(D):
            c = fixed_pos[f, a]
            if periodic:
                c = c - math.floor(c)
            ci[a] = int(math.floor((c - glo[a]) / cw[a]))
            if ci[a] < 0 or ci[a] >= nc[a]:
                if periodic:
                    ci[a] = min(max(ci[a], 0), nc[a] - 1)
                else:
                    inside = False
        if not inside:
            continue
        for a in range(D):
            pos[count, a] = fixed_pos[f, a]
        rad[count] = fixed_rad[f]
        h = (ci[0] * nc[1] + ci[1]) * nc[2] + ci[2]
        nxt[count] = head[h]
        head[h] = count
        count += 1

    total = cumw[cumw.shape[0] - 1]
    placed = 0
    p = np.empty(D)
    for _ in range(target):
        x = np.random.random() * total
        m = 0
        while m < cumw.shape[0] - 1 and cumw[m] <= x:
            m += 1
        r = radii[m]
        for _attempt in range(max_attempts):
            for a in range(D):
                if span_q[a] > 0:
                    k = int(math.floor(np.random.random() * span_q[a]))
                    if k >= span_q[a]:
                        k = span_q[a] - 1
                else:
                    k = 0
                p[a] = (lo_q[a] + k) / quant
                c = p[a]
                if periodic:
                    c = c - math.floor(c)
                ci[a] = min(max(int(math.floor((c - glo[a]) / cw[a])), 0), nc[a] - 1)
            ok = True
            for dx in range(-1, 2):
                if not ok:
                    break
                for dy in range(-1, 2):
                    if not ok:
                        break
                    for dz in range(-1, 2):
                        gx = ci[0] + dx
                        gy = ci[1] + dy
                        gz = ci[2] + dz
                        if periodic:
                            if nc[0] == 1 and dx != 0 or nc[1] == 1 and dy != 0 or nc[2] == 1 and dz != 0:
                                continue
                            gx %= nc[0]
                            gy %= nc[1]
                            gz %= nc[2]
                        elif gx < 0 or gy < 0 or gz < 0 or gx >= nc[0] or gy >= nc[1] or gz >= nc[2]:
                            continue
                        q = head[(gx * nc[1] + gy) * nc[2] + gz]
                        while q >= 0:
                            d2 = 0.0
                            for a in range(D):
                                d = p[a] - pos[q, a]
                                if periodic:
                                    d -= round(d)
                                d *= scale[a]
                                d2 += d * d
                            s = r + rad[q]
                            if d2 < s * s:
                                ok = False
                                break
                            q = nxt[q]
                        if not ok:
                            break
            if ok:
                for a in range(D):
                    pos[count, a] = p[a]
                    out_pos[placed, a] = p[a]
                rad[count] = r
                model[count] = m
                out_model[placed] = m
                h = (ci[0] * nc[1] + ci[1]) * nc[2] + ci[2]
                nxt[count] = head[h]
                head[h] = count
                count += 1
                placed += 1
                break
    return out_pos[:placed], out_model[:placed]

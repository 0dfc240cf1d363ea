"""Compiled inner loops (BVH build/traversal, UV rasterisation).

Kept free of Python objects so numba can compile them with ``nogil``.
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)

LEAF_SIZE = 4


@njit(**_JIT)
def build_bvh(tri_min, tri_max, centroid, leaf_size):
    n = centroid.shape[0]
    order = np.arange(n)
    max_nodes = max(2 * n, 1)
    node_min = np.empty((max_nodes, 3))
    node_max = np.empty((max_nodes, 3))
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    start = np.zeros(max_nodes, np.int64)
    count = np.zeros(max_nodes, np.int64)
    stack = np.empty((max_nodes, 3), np.int64)
    sp = 0
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        s = stack[sp, 1]
        e = stack[sp, 2]
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for i in range(s, e):
            t = order[i]
            for k in range(3):
                lo[k] = min(lo[k], tri_min[t, k])
                hi[k] = max(hi[k], tri_max[t, k])
                clo[k] = min(clo[k], centroid[t, k])
                chi[k] = max(chi[k], centroid[t, k])
        node_min[node] = lo
        node_max[node] = hi
        ext = chi - clo
        axis = 0
        if ext[1] > ext[axis]:
            axis = 1
        if ext[2] > ext[axis]:
            axis = 2
        if e - s <= leaf_size or ext[axis] <= 0.0:
            start[node] = s
            count[node] = e - s
            continue
        seg = order[s:e].copy()
        keys = np.empty(e - s)
        for i in range(e - s):
            keys[i] = centroid[seg[i], axis]
        perm = np.argsort(keys, kind="mergesort")
        for i in range(e - s):
            order[s + i] = seg[perm[i]]
        mid = (s + e) // 2
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        stack[sp, 0] = lc
        stack[sp, 1] = s
        stack[sp, 2] = mid
        sp += 1
        stack[sp, 0] = rc
        stack[sp, 1] = mid
        stack[sp, 2] = e
        sp += 1
    return (node_min[:n_nodes].copy(), node_max[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), start[:n_nodes].copy(), count[:n_nodes].copy(), order)


@njit(**_JIT)
def _slab(o, inv, bmin, bmax):
    t0 = -np.inf
    t1 = np.inf
    for k in range(3):
        a = (bmin[k] - o[k]) * inv[k]
        b = (bmax[k] - o[k]) * inv[k]
        if a > b:
            a, b = b, a
        if a > t0:
            t0 = a
        if b < t1:
            t1 = b
    return t0, t1


@njit(**_JIT)
def _ray_tri(o, d, a, b, c, eps):
    # Moller-Trumbore, double sided; eps widens the barycentric acceptance.
    e1x = b[0] - a[0]
    e1y = b[1] - a[1]
    e1z = b[2] - a[2]
    e2x = c[0] - a[0]
    e2y = c[1] - a[1]
    e2z = c[2] - a[2]
    px = d[1] * e2z - d[2] * e2y
    py = d[2] * e2x - d[0] * e2z
    pz = d[0] * e2y - d[1] * e2x
    det = e1x * px + e1y * py + e1z * pz
    scale = (abs(e1x) + abs(e1y) + abs(e1z)) * (abs(e2x) + abs(e2y) + abs(e2z))
    if abs(det) <= 1e-14 * scale:
        return False, 0.0, 0.0, 0.0
    inv = 1.0 / det
    sx = o[0] - a[0]
    sy = o[1] - a[1]
    sz = o[2] - a[2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < -eps or u > 1.0 + eps:
        return False, 0.0, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < -eps or u + v > 1.0 + eps:
        return False, 0.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return True, t, u, v


@njit(**_JIT)
def intersect_rays(origins, dirs, tmin, tmax, nearest_abs, eps,
                   tri_a, tri_b, tri_c, node_min, node_max, left, right, start, count, order):
    """First hit per ray with ``t`` in ``[tmin, tmax]``.

    With ``nearest_abs`` the hit minimising ``|t|`` wins (bidirectional line
    query), otherwise the smallest ``t``. Ties keep the lower face index.
    Returns ``(t, face, u, v)``; misses have ``face == -1``.
    """
    nr = origins.shape[0]
    out_t = np.full(nr, np.nan)
    out_f = np.full(nr, -1, np.int64)
    out_u = np.zeros(nr)
    out_v = np.zeros(nr)
    if left.shape[0] == 0:
        return out_t, out_f, out_u, out_v
    stack = np.empty(128, np.int64)
    inv = np.empty(3)
    for r in range(nr):
        o = origins[r]
        d = dirs[r]
        for k in range(3):
            inv[k] = 1.0 / d[k] if d[k] != 0.0 else (1e300 if not np.signbit(d[k]) else -1e300)
        best = np.inf
        bf = -1
        bu = 0.0
        bv = 0.0
        bt = np.nan
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            t0, t1 = _slab(o, inv, node_min[node], node_max[node])
            if t0 < tmin:
                t0 = tmin
            if t1 > tmax:
                t1 = tmax
            if t0 > t1:
                continue
            if nearest_abs:
                if t0 <= 0.0 <= t1:
                    lb = 0.0
                else:
                    lb = min(abs(t0), abs(t1))
            else:
                lb = t0
            if lb > best:
                continue
            if left[node] < 0:
                for i in range(start[node], start[node] + count[node]):
                    f = order[i]
                    hit, t, u, v = _ray_tri(o, d, tri_a[f], tri_b[f], tri_c[f], eps)
                    if not hit or t < tmin or t > tmax:
                        continue
                    key = abs(t) if nearest_abs else t
                    if key < best or (key == best and f < bf):
                        best = key
                        bf = f
                        bt = t
                        bu = u
                        bv = v
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        out_t[r] = bt
        out_f[r] = bf
        out_u[r] = bu
        out_v[r] = bv
    return out_t, out_f, out_u, out_v


@njit(**_JIT)
def _closest_on_tri(p, a, b, c):
    # Ericson, Real-Time Collision Detection 5.1.5; returns point and (u, v, w) weights.
    abx = b[0] - a[0]; aby = b[1] - a[1]; abz = b[2] - a[2]
    acx = c[0] - a[0]; acy = c[1] - a[1]; acz = c[2] - a[2]
    apx = p[0] - a[0]; apy = p[1] - a[1]; apz = p[2] - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bpx = p[0] - b[0]; bpy = p[1] - b[1]; bpz = p[2] - b[2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cpx = p[0] - c[0]; cpy = p[1] - c[1]; cpz = p[2] - c[2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@njit(**_JIT)
def closest_points(points, tri_a, tri_b, tri_c, node_min, node_max, left, right, start,
                   count, order):
    """Closest surface point per query: ``(distance, face, bary (N, 3), point (N, 3))``."""
    nq = points.shape[0]
    out_d = np.full(nq, np.inf)
    out_f = np.full(nq, -1, np.int64)
    out_b = np.zeros((nq, 3))
    out_p = np.full((nq, 3), np.nan)
    if left.shape[0] == 0:
        return out_d, out_f, out_b, out_p
    stack = np.empty(128, np.int64)
    for q in range(nq):
        p = points[q]
        best = np.inf
        sp = 1
        stack[0] = 0
        while sp > 0:
            sp -= 1
            node = stack[sp]
            lb = 0.0
            for k in range(3):
                if p[k] < node_min[node, k]:
                    dd = node_min[node, k] - p[k]
                    lb += dd * dd
                elif p[k] > node_max[node, k]:
                    dd = p[k] - node_max[node, k]
                    lb += dd * dd
            if lb > best:
                continue
            if left[node] < 0:
                for i in range(start[node], start[node] + count[node]):
                    f = order[i]
                    a = tri_a[f]
                    b = tri_b[f]
                    c = tri_c[f]
                    wa, wb, wc = _closest_on_tri(p, a, b, c)
                    d2 = 0.0
                    for k in range(3):
                        x = wa * a[k] + wb * b[k] + wc * c[k] - p[k]
                        d2 += x * x
                    if d2 < best or (d2 == best and f < out_f[q]):
                        best = d2
                        out_f[q] = f
                        out_b[q, 0] = wa
                        out_b[q, 1] = wb
                        out_b[q, 2] = wc
            else:
                # visit the nearer child first
                l = left[node]
                rr = right[node]
                dl = 0.0
                dr = 0.0
                for k in range(3):
                    cl = 0.5 * (node_min[l, k] + node_max[l, k]) - p[k]
                    cr = 0.5 * (node_min[rr, k] + node_max[rr, k]) - p[k]
                    dl += cl * cl
                    dr += cr * cr
                if dl < dr:
                    stack[sp] = rr
                    stack[sp + 1] = l
                else:
                    stack[sp] = l
                    stack[sp + 1] = rr
                sp += 2
        out_d[q] = np.sqrt(best)
        f = out_f[q]
        for k in range(3):
            out_p[q, k] = (out_b[q, 0] * tri_a[f, k] + out_b[q, 1] * tri_b[f, k]
                           + out_b[q, 2] * tri_c[f, k])
    return out_d, out_f, out_b, out_p


@njit(**_JIT)
def rasterize_uv(uv, faces, width, height, eps):
    """Face id and barycentric weights for every pixel centre covered by a UV triangle."""
    face_id = np.full((height, width), -1, np.int64)
    bary = np.zeros((height, width, 3))
    for f in range(faces.shape[0]):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        x0 = uv[i0, 0] * width - 0.5
        y0 = uv[i0, 1] * height - 0.5
        x1 = uv[i1, 0] * width - 0.5
        y1 = uv[i1, 1] * height - 0.5
        x2 = uv[i2, 0] * width - 0.5
        y2 = uv[i2, 1] * height - 0.5
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        cmin = max(int(np.floor(min(x0, x1, x2))), 0)
        cmax = min(int(np.ceil(max(x0, x1, x2))), width - 1)
        rmin = max(int(np.floor(min(y0, y1, y2))), 0)
        rmax = min(int(np.ceil(max(y0, y1, y2))), height - 1)
        for r in range(rmin, rmax + 1):
            for c in range(cmin, cmax + 1):
                w0 = ((x1 - c) * (y2 - r) - (x2 - c) * (y1 - r)) / area
                w1 = ((x2 - c) * (y0 - r) - (x0 - c) * (y2 - r)) / area
                w2 = 1.0 - w0 - w1
                if w0 < -eps or w1 < -eps or w2 < -eps:
                    continue
                if face_id[r, c] >= 0:
                    continue
                face_id[r, c] = f
                bary[r, c, 0] = w0
                bary[r, c, 1] = w1
                bary[r, c, 2] = w2
    return face_id, bary


@njit(**_JIT)
def zbuffer_min(ix, iy, depth, width, height):
    zbuf = np.full((height, width), np.inf)
    for i in range(ix.shape[0]):
        x = ix[i]
        y = iy[i]
        if 0 <= x < width and 0 <= y < height:
            if depth[i] < zbuf[y, x]:
                zbuf[y, x] = depth[i]
    return zbuf

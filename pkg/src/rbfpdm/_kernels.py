"""numba kernels for point-to-triangle queries.

Scalar mirror of `mesh.closest_point_on_triangles`; region codes are shared.
"""

import numpy as np
from numba import njit, prange

FACE, VERT_A, VERT_B, VERT_C, EDGE_AB, EDGE_BC, EDGE_CA = range(7)


@njit(cache=True, inline="always")
def _closest(px, py, pz, tri, f, out):
    ax, ay, az = tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2]
    bx, by, bz = tri[f, 1, 0], tri[f, 1, 1], tri[f, 1, 2]
    cx, cy, cz = tri[f, 2, 0], tri[f, 2, 1], tri[f, 2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        out[0], out[1], out[2] = ax, ay, az
        return VERT_A
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        out[0], out[1], out[2] = bx, by, bz
        return VERT_B
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        out[0], out[1], out[2] = ax + v * abx, ay + v * aby, az + v * abz
        return EDGE_AB
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        out[0], out[1], out[2] = cx, cy, cz
        return VERT_C
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        out[0], out[1], out[2] = ax + w * acx, ay + w * acy, az + w * acz
        return EDGE_CA
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out[0], out[1], out[2] = bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
        return EDGE_BC
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    out[0] = ax + abx * v + acx * w
    out[1] = ay + aby * v + acy * w
    out[2] = az + abz * v + acz * w
    return FACE


@njit(cache=True)
def _sphere_lb(px, py, pz, center, radius, node):
    return np.sqrt((px - center[node, 0]) ** 2 + (py - center[node, 1]) ** 2
                   + (pz - center[node, 2]) ** 2) - radius[node]


@njit(cache=True)
def nearest_bvh(pts, tri, order, node_child, node_range, node_center, node_radius):
    """Exact nearest triangle by depth-first, nearest-child-first BVH traversal.

    node_child[k] = (left, right), -1 for leaves; node_range[k] = slice of
    `order` holding a leaf's triangles. Node 0 is the root.
    """
    n = pts.shape[0]
    dist = np.empty(n)
    q = np.empty((n, 3))
    face = np.empty(n, dtype=np.int64)
    region = np.empty(n, dtype=np.int8)
    buf = np.empty(3)
    stack = np.empty(256, dtype=np.int64)
    for i in range(n):
        px, py, pz = pts[i, 0], pts[i, 1], pts[i, 2]
        best = np.inf
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _sphere_lb(px, py, pz, node_center, node_radius, node) > best:
                continue
            left = node_child[node, 0]
            if left < 0:
                for t in range(node_range[node, 0], node_range[node, 1]):
                    f = order[t]
                    r = _closest(px, py, pz, tri, f, buf)
                    d = np.sqrt((px - buf[0]) ** 2 + (py - buf[1]) ** 2 + (pz - buf[2]) ** 2)
                    if d < best:
                        best = d
                        q[i, 0], q[i, 1], q[i, 2] = buf[0], buf[1], buf[2]
                        face[i] = f
                        region[i] = r
                continue
            right = node_child[node, 1]
            lb_l = _sphere_lb(px, py, pz, node_center, node_radius, left)
            lb_r = _sphere_lb(px, py, pz, node_center, node_radius, right)
            # push the farther child first so the nearer one is explored first
            if lb_l < lb_r:
                stack[top] = right
                stack[top + 1] = left
            else:
                stack[top] = left
                stack[top + 1] = right
            top += 2
        dist[i] = best
    return dist, q, face, region

"""Thin-lens raytracer: stratified concentric-disk pupil sampling, first-hit
triangle intersection through a median-split BVH, barycentric texture lookup.

All kernels are numba-compiled. Per-pixel random streams are derived from the
global seed and the pixel index with a splitmix64 mixer, so parallel and
serial renders agree bitwise.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .geometry import CameraIntrinsics, Mesh, RenderError
from .sensor import ThinLens

__all__ = ["raytrace", "build_bvh"]

_LEAF_SIZE = 4
_EPS = 1e-12
_T_MIN = 1e-9

_U64 = np.uint64


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z + _U64(0x9E3779B97F4A7C15)) & _U64(0xFFFFFFFFFFFFFFFF)
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


@njit(cache=True, inline="always")
def _rand01(state):
    """Advance a splitmix64 stream; returns (new_state, uniform in [0,1))."""
    state = state + _U64(0x9E3779B97F4A7C15)
    return state, (_mix64(state) >> _U64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _build_bvh_kernel(tri_lo, tri_hi, centroids):
    n = tri_lo.shape[0]
    max_nodes = 2 * n + 1
    node_lo = np.empty((max_nodes, 3))
    node_hi = np.empty((max_nodes, 3))
    node_left = np.full(max_nodes, -1, dtype=np.int64)
    node_right = np.full(max_nodes, -1, dtype=np.int64)
    node_start = np.zeros(max_nodes, dtype=np.int64)
    node_count = np.zeros(max_nodes, dtype=np.int64)
    order = np.arange(n)

    stack = np.empty((64 + 2 * n, 3), dtype=np.int64)  # (node, lo, hi)
    stack[0] = (0, 0, n)
    top = 1
    next_node = 1
    while top > 0:
        top -= 1
        node, lo, hi = stack[top]
        bmin = np.full(3, np.inf)
        bmax = np.full(3, -np.inf)
        for k in range(lo, hi):
            t = order[k]
            for a in range(3):
                if tri_lo[t, a] < bmin[a]:
                    bmin[a] = tri_lo[t, a]
                if tri_hi[t, a] > bmax[a]:
                    bmax[a] = tri_hi[t, a]
        node_lo[node] = bmin
        node_hi[node] = bmax
        if hi - lo <= _LEAF_SIZE:
            node_start[node] = lo
            node_count[node] = hi - lo
            continue
        extent = bmax - bmin
        axis = 0
        if extent[1] > extent[axis]:
            axis = 1
        if extent[2] > extent[axis]:
            axis = 2
        seg = order[lo:hi]
        keys = np.empty(hi - lo)
        for k in range(hi - lo):
            keys[k] = centroids[seg[k], axis]
        perm = np.argsort(keys, kind="mergesort")
        order[lo:hi] = seg[perm]
        mid = lo + (hi - lo) // 2
        left = next_node
        right = next_node + 1
        next_node += 2
        node_left[node] = left
        node_right[node] = right
        stack[top] = (left, lo, mid)
        top += 1
        stack[top] = (right, mid, hi)
        top += 1
    return (
        node_lo[:next_node],
        node_hi[:next_node],
        node_left[:next_node],
        node_right[:next_node],
        node_start[:next_node],
        node_count[:next_node],
        order,
    )


def build_bvh(mesh: Mesh):
    """Median-split BVH over triangle bounds; returns flat arrays + packed tris."""
    if mesh.num_triangles == 0:
        raise RenderError("cannot trace an empty mesh")
    tri = mesh.vertices[mesh.triangles]  # (T, 3, 3)
    tri_lo = tri.min(axis=1)
    tri_hi = tri.max(axis=1)
    centroids = tri.mean(axis=1)
    nodes = _build_bvh_kernel(tri_lo, tri_hi, centroids)
    v0 = np.ascontiguousarray(tri[:, 0])
    e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
    e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
    uv = mesh.texture_coords[mesh.triangles]  # (T, 3, 2)
    return nodes, v0, e1, e2, np.ascontiguousarray(uv)


@njit(cache=True, inline="always")
def _hit_aabb(ox, oy, oz, ix, iy, iz, lo, hi, tmax):
    t0x = (lo[0] - ox) * ix
    t1x = (hi[0] - ox) * ix
    tnear = min(t0x, t1x)
    tfar = max(t0x, t1x)
    t0y = (lo[1] - oy) * iy
    t1y = (hi[1] - oy) * iy
    tnear = max(tnear, min(t0y, t1y))
    tfar = min(tfar, max(t0y, t1y))
    t0z = (lo[2] - oz) * iz
    t1z = (hi[2] - oz) * iz
    tnear = max(tnear, min(t0z, t1z))
    tfar = min(tfar, max(t0z, t1z))
    return tnear <= tfar and tfar > _T_MIN and tnear < tmax


@njit(cache=True)
def _first_hit(
    ox, oy, oz, dx, dy, dz,
    node_lo, node_hi, node_left, node_right, node_start, node_count, order,
    v0, e1, e2,
):
    """(triangle index, t, barycentric u, v) of the nearest hit, or (-1, ...)."""
    inv_x = 1.0 / dx if abs(dx) > _EPS else (1e30 if dx >= 0 else -1e30)
    inv_y = 1.0 / dy if abs(dy) > _EPS else (1e30 if dy >= 0 else -1e30)
    inv_z = 1.0 / dz if abs(dz) > _EPS else (1e30 if dz >= 0 else -1e30)
    best_t = np.inf
    best_tri = -1
    best_u = 0.0
    best_v = 0.0
    stack = np.empty(128, dtype=np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if not _hit_aabb(ox, oy, oz, inv_x, inv_y, inv_z,
                         node_lo[node], node_hi[node], best_t):
            continue
        left = node_left[node]
        if left >= 0:
            stack[top] = left
            top += 1
            stack[top] = node_right[node]
            top += 1
            continue
        start = node_start[node]
        for k in range(start, start + node_count[node]):
            t_idx = order[k]
            # Moller-Trumbore with symmetric epsilon
            px = dy * e2[t_idx, 2] - dz * e2[t_idx, 1]
            py = dz * e2[t_idx, 0] - dx * e2[t_idx, 2]
            pz = dx * e2[t_idx, 1] - dy * e2[t_idx, 0]
            det = e1[t_idx, 0] * px + e1[t_idx, 1] * py + e1[t_idx, 2] * pz
            if abs(det) < _EPS:
                continue
            inv_det = 1.0 / det
            tx = ox - v0[t_idx, 0]
            ty = oy - v0[t_idx, 1]
            tz = oz - v0[t_idx, 2]
            u = (tx * px + ty * py + tz * pz) * inv_det
            if u < -1e-9 or u > 1.0 + 1e-9:
                continue
            qx = ty * e1[t_idx, 2] - tz * e1[t_idx, 1]
            qy = tz * e1[t_idx, 0] - tx * e1[t_idx, 2]
            qz = tx * e1[t_idx, 1] - ty * e1[t_idx, 0]
            v = (dx * qx + dy * qy + dz * qz) * inv_det
            if v < -1e-9 or u + v > 1.0 + 1e-9:
                continue
            t = (e2[t_idx, 0] * qx + e2[t_idx, 1] * qy + e2[t_idx, 2] * qz) * inv_det
            if _T_MIN < t < best_t:
                best_t = t
                best_tri = t_idx
                best_u = u
                best_v = v
    return best_tri, best_t, best_u, best_v


@njit(cache=True, inline="always")
def _tex_bilinear(tex, u, v, c):
    ht, wt = tex.shape[0], tex.shape[1]
    x = u * wt - 0.5
    y = v * ht - 0.5
    x = min(max(x, 0.0), wt - 1.0)
    y = min(max(y, 0.0), ht - 1.0)
    x0 = int(x)
    y0 = int(y)
    x1 = min(x0 + 1, wt - 1)
    y1 = min(y0 + 1, ht - 1)
    fx = x - x0
    fy = y - y0
    return (
        tex[y0, x0, c] * (1 - fx) * (1 - fy)
        + tex[y0, x1, c] * fx * (1 - fy)
        + tex[y1, x0, c] * (1 - fx) * fy
        + tex[y1, x1, c] * fx * fy
    )


@njit(cache=True, inline="always")
def _concentric_disk(u1, u2):
    sx = 2.0 * u1 - 1.0
    sy = 2.0 * u2 - 1.0
    if sx == 0.0 and sy == 0.0:
        return 0.0, 0.0
    if abs(sx) > abs(sy):
        r = sx
        theta = (np.pi / 4.0) * (sy / sx)
    else:
        r = sy
        theta = (np.pi / 2.0) - (np.pi / 4.0) * (sx / sy)
    return r * np.cos(theta), r * np.sin(theta)


@njit(cache=True, parallel=True)
def _render_kernel(
    out, miss,
    grid_h, grid_w, spacing, cx, cy, focal,
    focus_dist, pupil_r, side, n_samples, stratified,
    node_lo, node_hi, node_left, node_right, node_start, node_count, order,
    v0, e1, e2, uv, tex, background, seed,
):
    for i in prange(grid_h):
        for j in range(grid_w):
            x = (j + 0.5) * spacing
            y = (i + 0.5) * spacing
            dx = (x - cx) / focal
            dy = (y - cy) / focal
            norm = np.sqrt(dx * dx + dy * dy + 1.0)
            # focal point F(x): distance focus_dist along the chief ray
            fx = focus_dist * dx / norm
            fy = focus_dist * dy / norm
            fz = focus_dist / norm
            state = _mix64(_U64(seed) ^ _mix64(_U64(i * grid_w + j)))
            r0 = 0.0
            g0 = 0.0
            b0 = 0.0
            misses = 0
            for s in range(n_samples):
                if pupil_r <= 0.0:
                    px = 0.0
                    py = 0.0
                else:
                    state, ua = _rand01(state)
                    state, ub = _rand01(state)
                    if stratified:
                        a = s // side
                        b = s % side
                        u1 = (a + ua) / side
                        u2 = (b + ub) / side
                    else:
                        u1 = ua
                        u2 = ub
                    du, dv = _concentric_disk(u1, u2)
                    px = du * pupil_r
                    py = dv * pupil_r
                rdx = fx - px
                rdy = fy - py
                rdz = fz
                tri, _t, bu, bv = _first_hit(
                    px, py, 0.0, rdx, rdy, rdz,
                    node_lo, node_hi, node_left, node_right,
                    node_start, node_count, order, v0, e1, e2,
                )
                if tri < 0:
                    r0 += background[0]
                    g0 += background[1]
                    b0 += background[2]
                    misses += 1
                else:
                    w0 = 1.0 - bu - bv
                    tu = w0 * uv[tri, 0, 0] + bu * uv[tri, 1, 0] + bv * uv[tri, 2, 0]
                    tv = w0 * uv[tri, 0, 1] + bu * uv[tri, 1, 1] + bv * uv[tri, 2, 1]
                    r0 += _tex_bilinear(tex, tu, tv, 0)
                    g0 += _tex_bilinear(tex, tu, tv, 1)
                    b0 += _tex_bilinear(tex, tu, tv, 2)
            inv = 1.0 / n_samples
            out[i, j, 0] = r0 * inv
            out[i, j, 1] = g0 * inv
            out[i, j, 2] = b0 * inv
            miss[i, j] = misses * inv


def raytrace(
    mesh: Mesh,
    intrinsics: CameraIntrinsics,
    lens: ThinLens,
    grid_w: int,
    grid_h: int,
    spacing: float = 1.0,
    spp: int = 16,
    seed: int = 0,
    background: float | tuple = 0.5,
    bvh=None,
    stratified: bool = True,
):
    """Continuous-irradiance samples on a (grid_h, grid_w) lattice.

    Each sample averages, over pupil points, the radiance of the first mesh
    intersection along the ray through the sample's focal point. Stratified
    concentric-disk sampling is the default (spp rounds to a square grid);
    stratified=False draws plain uniform pupil samples, exactly spp of them.
    Returns (image (grid_h, grid_w, 3), miss_fraction array).
    """
    if spp < 1:
        raise RenderError("spp must be >= 1")
    if bvh is None:
        bvh = build_bvh(mesh)
    nodes, v0, e1, e2, uv = bvh
    if lens.pupil_radius <= 0.0:
        side, n_samples = 1, 1
    elif stratified:
        side = max(1, int(round(np.sqrt(spp))))
        n_samples = side * side
    else:
        side, n_samples = 1, spp
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()
    out = np.empty((grid_h, grid_w, 3))
    miss = np.empty((grid_h, grid_w))
    cx, cy = intrinsics.principal_point
    _render_kernel(
        out, miss, grid_h, grid_w, float(spacing), float(cx), float(cy),
        float(intrinsics.focal_length), float(lens.focus_distance),
        float(lens.pupil_radius), side, n_samples, stratified,
        nodes[0], nodes[1], nodes[2], nodes[3], nodes[4], nodes[5], nodes[6],
        v0, e1, e2, uv, mesh.radiance_texture, bg, np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
    )
    return out, miss

"""Axis-aligned bounding-box hierarchy over world-space triangles.

Traversal is packet style: a node is tested against every ray still
interested in it, so the Python loop runs over nodes, not rays.
"""
from __future__ import annotations

import numpy as np

LEAF_SIZE = 4
BARY_TOL = 1e-12
PARALLEL_TOL = 1e-14


def ray_triangle(origins, dirs, tris):
    """Moller-Trumbore for every (ray, triangle) pair.

    origins, dirs: (R, 3); tris: (T, 3, 3). Returns t of shape (R, T) with
    ``inf`` where there is no hit (including t <= 0).
    """
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    pvec = np.cross(dirs[:, None, :], e2[None, :, :])
    det = np.einsum("rtk,tk->rt", pvec, e1)
    ok = np.abs(det) > PARALLEL_TOL
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origins[:, None, :] - v0[None, :, :]
    u = np.einsum("rtk,rtk->rt", tvec, pvec) * inv
    qvec = np.cross(tvec, e1[None, :, :])
    v = np.einsum("rk,rtk->rt", dirs, qvec) * inv
    t = np.einsum("rtk,tk->rt", qvec, e2) * inv
    hit = ok & (u >= -BARY_TOL) & (v >= -BARY_TOL) & (u + v <= 1 + BARY_TOL) & (t > 0)
    return np.where(hit, t, np.inf)


def brute_force_closest(origins, dirs, tris, t_min=0.0, t_max=None):
    """Reference nearest-hit over all triangles (no acceleration)."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    t = ray_triangle(origins, dirs, tris)
    t = np.where(t > t_min, t, np.inf)
    if t_max is not None:
        lim = np.broadcast_to(np.asarray(t_max, float), (len(t),))[:, None]
        t = np.where(t < lim, t, np.inf)
    idx = np.argmin(t, axis=1)
    best = t[np.arange(len(t)), idx]
    idx = np.where(np.isfinite(best), idx, -1)
    return best, idx


class BVH:
    def __init__(self, triangles):
        tris = np.asarray(triangles, dtype=float)
        self.n_triangles = len(tris)
        order = np.arange(len(tris))
        lo, hi, left, right, start, count = [], [], [], [], [], []
        cent = tris.mean(axis=1)

        def build(ids):
            node = len(lo)
            pts = tris[ids].reshape(-1, 3)
            lo.append(pts.min(0))
            hi.append(pts.max(0))
            left.append(-1)
            right.append(-1)
            start.append(-1)
            count.append(0)
            if len(ids) <= LEAF_SIZE:
                start[node] = len(leaf_order)
                count[node] = len(ids)
                leaf_order.extend(ids.tolist())
                return node
            c = cent[ids]
            axis = int(np.argmax(c.max(0) - c.min(0)))
            srt = ids[np.argsort(c[:, axis], kind="stable")]
            mid = len(srt) // 2
            left[node] = build(srt[:mid])
            right[node] = build(srt[mid:])
            return node

        leaf_order: list = []
        if len(tris):
            build(order)
        self.lo = np.array(lo).reshape(-1, 3)
        self.hi = np.array(hi).reshape(-1, 3)
        self.left = np.array(left, dtype=int)
        self.right = np.array(right, dtype=int)
        self.start = np.array(start, dtype=int)
        self.count = np.array(count, dtype=int)
        self.order = np.array(leaf_order, dtype=int)
        self.tris = tris

    def closest_hit(self, origins, dirs, t_min=0.0, t_max=None):
        """Nearest triangle hit per ray with t_min < t < t_max.

        Returns (t, triangle_index); misses give (inf, -1).
        """
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        n = len(origins)
        best_t = np.full(n, np.inf) if t_max is None else np.broadcast_to(np.asarray(t_max, float), (n,)).copy()
        limit = best_t.copy()
        best_i = np.full(n, -1)
        if n == 0 or self.n_triangles == 0:
            return np.full(n, np.inf), best_i
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_d = 1.0 / dirs
        stack = [(0, np.arange(n))]
        while stack:
            node, rays = stack.pop()
            t0 = (self.lo[node] - origins[rays]) * inv_d[rays]
            t1 = (self.hi[node] - origins[rays]) * inv_d[rays]
            # NaN comes from 0 * inf when a ray lies in a slab plane; treat as inside
            mn = np.minimum(t0, t1)
            mx = np.maximum(t0, t1)
            bad = np.isnan(mn) | np.isnan(mx)
            tmin = np.where(bad, -np.inf, mn).max(axis=1)
            tmax = np.where(bad, np.inf, mx).min(axis=1)
            keep = (tmax >= np.maximum(tmin, t_min) - 1e-9) & (tmin <= best_t[rays] + 1e-9)
            rays = rays[keep]
            if rays.size == 0:
                continue
            if self.count[node] > 0:
                ids = self.order[self.start[node]:self.start[node] + self.count[node]]
                t = ray_triangle(origins[rays], dirs[rays], self.tris[ids])
                t = np.where(t > t_min, t, np.inf)
                j = np.argmin(t, axis=1)
                tj = t[np.arange(len(rays)), j]
                better = tj < best_t[rays]
                best_t[rays[better]] = tj[better]
                best_i[rays[better]] = ids[j[better]]
            else:
                stack.append((self.right[node], rays))
                stack.append((self.left[node], rays))
        best_t = np.where(best_i >= 0, best_t, np.inf)
        if t_max is not None:
            best_t = np.where(best_t < limit, best_t, np.inf)
            best_i = np.where(np.isfinite(best_t), best_i, -1)
        return best_t, best_i

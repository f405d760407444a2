"""Bounding volume hierarchy for nearest-triangle queries."""

from __future__ import annotations

import numpy as np

from .errors import EmptyInput


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest points on triangles (a, b, c) to points p, all shaped (N, 3).

    Voronoi-region classification (Ericson, Real-Time Collision Detection
    5.1.5), vectorized. Returns ``(closest, barycentric)`` with barycentric
    weights for (a, b, c).
    """
    def dot(x, y):
        return (x * y).sum(axis=1)

    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    # regions in priority order: vertices a, b, c; edges ab, ac, bc; interior
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (d6 >= 0) & (d5 <= d6),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in, w_in = vb * denom, vc * denom
    zero, one = 0.0, 1.0
    wb = np.select(conds, [zero, one, zero, t_ab, zero, 1.0 - t_bc], default=v_in)
    wc = np.select(conds, [zero, zero, one, zero, t_ac, t_bc], default=w_in)
    bary = np.stack([1.0 - wb - wc, wb, wc], axis=1)
    bary = np.nan_to_num(bary, nan=1.0 / 3.0)
    closest = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return closest, bary


class TriangleBVH:
    """Median-split AABB tree over triangles with batched nearest queries."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray, leaf_size: int = 8,
                 dense_max_faces: int = 64):
        # below dense_max_faces a brute-force sweep beats tree traversal
        self.dense_max_faces = dense_max_faces
        faces = np.asarray(faces, dtype=np.int64)
        if len(faces) == 0:
            raise EmptyInput("BVH needs at least one triangle")
        self.tri = np.asarray(vertices, dtype=np.float64)[faces]  # (F, 3, 3)
        centroids = self.tri.mean(axis=1)
        tmin, tmax = self.tri.min(axis=1), self.tri.max(axis=1)

        lo, hi, left, right, start, count = [], [], [], [], [], []
        order = np.arange(len(faces))

        def build(ids: np.ndarray, offset: int) -> int:
            node = len(lo)
            lo.append(tmin[ids].min(axis=0))
            hi.append(tmax[ids].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(offset)
            count.append(len(ids))
            if len(ids) <= leaf_size:
                order[offset:offset + len(ids)] = ids
                return node
            c = centroids[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            srt = ids[np.argsort(c[:, axis], kind="stable")]
            half = len(srt) // 2
            left[node] = build(srt[:half], offset)
            right[node] = build(srt[half:], offset + half)
            count[node] = 0
            return node

        build(np.arange(len(faces)), 0)
        self.node_lo = np.array(lo)
        self.node_hi = np.array(hi)
        self.left = np.array(left)
        self.right = np.array(right)
        self.start = np.array(start)
        self.count = np.array(count)
        self.order = order

    def _nearest_dense(self, pts: np.ndarray):
        """All point-face pairs at once; argmin keeps the lowest face on ties."""
        F = len(self.tri)
        n = len(pts)
        d2_out = np.empty(n)
        face_out = np.empty(n, dtype=np.int64)
        bary_out = np.empty((n, 3))
        chunk = max(1, 200_000 // F)
        for s0 in range(0, n, chunk):
            p = pts[s0:s0 + chunk]
            m = len(p)
            rp = np.repeat(p, F, axis=0)
            t = np.tile(self.tri, (m, 1, 1))
            cp, bary = closest_point_on_triangles(rp, t[:, 0], t[:, 1], t[:, 2])
            d2 = ((rp - cp) ** 2).sum(axis=1).reshape(m, F)
            best = np.argmin(d2, axis=1)
            rows = np.arange(m)
            d2_out[s0:s0 + m] = d2[rows, best]
            face_out[s0:s0 + m] = best
            bary_out[s0:s0 + m] = bary.reshape(m, F, 3)[rows, best]
        return d2_out, face_out, bary_out

    def _box_dist2(self, pts: np.ndarray, nodes: np.ndarray) -> np.ndarray:
        d = np.maximum(self.node_lo[nodes] - pts, 0.0) + np.maximum(pts - self.node_hi[nodes], 0.0)
        return np.einsum("ij,ij->i", d, d)

    def nearest(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest triangle per point.

        Returns ``(squared_distance, face_index, barycentric)``. Ties resolve
        to the lowest face index.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.tri) <= self.dense_max_faces:
            return self._nearest_dense(pts)
        n = len(pts)
        best_d2 = np.full(n, np.inf)
        best_face = np.full(n, -1, dtype=np.int64)
        best_bary = np.zeros((n, 3))
        # frontier of (point, node) pairs, breadth first
        qp = np.arange(n)
        qn = np.zeros(n, dtype=np.int64)
        while len(qp):
            bd = self._box_dist2(pts[qp], qn)
            alive = bd <= best_d2[qp]
            qp, qn = qp[alive], qn[alive]
            leaf = self.count[qn] > 0
            lp, ln = qp[leaf], qn[leaf]
            if len(lp):
                cnt = self.count[ln]
                rp = np.repeat(lp, cnt)
                offs = np.repeat(self.start[ln], cnt) + (
                    np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt))
                fid = self.order[offs]
                t = self.tri[fid]
                cp, bary = closest_point_on_triangles(pts[rp], t[:, 0], t[:, 1], t[:, 2])
                d2 = np.einsum("ij,ij->i", pts[rp] - cp, pts[rp] - cp)
                # reduce candidates per point: smallest d2, then lowest face id
                srt = np.lexsort((fid, d2, rp))
                rp_s = rp[srt]
                first = np.ones(len(srt), dtype=bool)
                first[1:] = rp_s[1:] != rp_s[:-1]
                win = srt[first]
                wp = rp[win]
                better = (d2[win] < best_d2[wp]) | ((d2[win] == best_d2[wp]) & (fid[win] < best_face[wp]))
                wp, win = wp[better], win[better]
                best_d2[wp] = d2[win]
                best_face[wp] = fid[win]
                best_bary[wp] = bary[win]
            ip, inn = qp[~leaf], qn[~leaf]
            qp = np.concatenate([ip, ip])
            qn = np.concatenate([self.left[inn], self.right[inn]])
        return best_d2, best_face, best_bary

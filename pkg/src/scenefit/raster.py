"""Soft silhouette rasterization with forward-mode pose derivatives.

For pixel i and projected face f the coverage is

    p_if = sigmoid(sign_if * d_if**2 / sigma)

with ``d_if`` the distance from the pixel center to the triangle boundary in
normalized device units (pixel distance * 2 / max(width, height)) and
``sign_if`` = +1 inside, -1 outside. Pixel coverage is the product complement
``1 - prod_f (1 - p_if)``, accumulated in log space for stability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dual as D
from .dual import Dual
from .errors import AllFacesCulled, EmptyMesh, ValidationError
from .geometry import BinaryMask, Camera, TriMesh

NEAR = 1e-6
# log-odds beyond which a face's contribution is dropped (p < e^-36)
CUTOFF = 36.0
# exponent of the smooth minimum over nearby silhouette contour segments
SMOOTH_MIN_Q = 8.0


@dataclass(frozen=True)
class SoftRasterConfig:
    sigma: float = 1e-4
    gamma_blend: float = 1e-4  # reserved, unused for silhouettes
    max_faces_per_pixel: int = 64
    # drop faces whose counter-clockwise normal faces away from the camera;
    # a closed mesh otherwise stacks two faces on every silhouette edge,
    # which pushes the 0.5 contour outward
    cull_backfaces: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if self.max_faces_per_pixel < 1:
            raise ValidationError("max_faces_per_pixel must be >= 1")


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel coverage in [0, 1]; ``tangent[v, u, j]`` = d value / d theta_j."""

    values: np.ndarray
    tangent: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def as_dual(self, k: int | None = None) -> Dual:
        if self.tangent is not None:
            return Dual(self.values, self.tangent)
        return Dual.constant(self.values, k or 0)


def _to_dual_vertices(mesh: TriMesh, tangents) -> Dual:
    if tangents is None:
        return Dual.constant(mesh.vertices, 0)
    tangents = np.asarray(tangents, dtype=np.float64)
    if tangents.shape[:2] != mesh.vertices.shape:
        raise ValidationError("need one 3D tangent per vertex per parameter")
    return Dual(mesh.vertices, tangents)


@dataclass
class _Projected:
    uv: Dual  # (F, 3, 2) in normalized device units
    face_ids: np.ndarray  # indices into mesh.faces of kept faces
    scale: float


def _project_faces(verts: Dual, faces: np.ndarray, camera: Camera) -> _Projected:
    R, t = camera.pose.rotation, camera.pose.translation
    pc = D.matvec(R.T, verts - t)
    z = pc.val[:, 2]
    front = np.all(z[faces] > NEAR, axis=1)
    kept = np.nonzero(front)[0]
    scale = 2.0 / max(camera.width, camera.height)
    used = np.unique(faces[kept])
    if len(used) == 0:
        return _Projected(Dual.constant(np.zeros((0, 3, 2)), verts.k), kept, scale)
    sub = pc[used]
    zs = sub[:, 2]
    u = (sub[:, 0] / zs * camera.fx + camera.cx) * scale
    v = (sub[:, 1] / zs * camera.fy + camera.cy) * scale
    uv = D.stack([u, v], axis=-1)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    tri = remap[faces[kept]]
    return _Projected(uv[tri.reshape(-1)].reshape(len(kept), 3, 2), kept, scale)


def _candidate_pairs(tri_uv: np.ndarray, scale: float, width: int, height: int, radius: float):
    """Enumerate (face, pixel) pairs from each face's expanded bounding rectangle."""
    lo = (tri_uv.min(axis=1) - radius) / scale
    hi = (tri_uv.max(axis=1) + radius) / scale
    x0 = np.clip(np.ceil(lo[:, 0]), 0, width).astype(np.int64)
    y0 = np.clip(np.ceil(lo[:, 1]), 0, height).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0]) + 1, 0, width).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1]) + 1, 0, height).astype(np.int64)
    nx, ny = np.maximum(x1 - x0, 0), np.maximum(y1 - y0, 0)
    counts = nx * ny
    total = int(counts.sum())
    face = np.repeat(np.arange(len(tri_uv)), counts)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - offsets
    nxf = nx[face]
    px = x0[face] + local % np.maximum(nxf, 1)
    py = y0[face] + local // np.maximum(nxf, 1)
    return face, px, py


def contour_edges(faces: np.ndarray) -> np.ndarray:
    """(F, 3) flags: edge i of face f (vertices i, i+1) is used by no other face."""
    e = np.stack([faces, np.roll(faces, -1, axis=1)], axis=-1).reshape(-1, 2)
    key = np.sort(e, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return (counts[inv.reshape(-1)] == 1).reshape(-1, 3)


def _edge_values(tri: np.ndarray, p: np.ndarray):
    """Plain-float pass over (face, pixel) pairs.

    ``tri`` is (N, 3, 2), ``p`` is (N, 2). Returns (d2, edge index, inside)
    for the nearest edge; ties resolve to the lowest edge index.
    """
    d2 = np.empty((len(p), 3))
    cross = np.empty((len(p), 3))
    for i in range(3):
        a, b = tri[:, i], tri[:, (i + 1) % 3]
        e, w = b - a, p - a
        d2[:, i] = _seg_d2(a, b, p)
        cross[:, i] = e[:, 0] * w[:, 1] - e[:, 1] * w[:, 0]
    inside = np.all(cross >= 0, axis=1) | np.all(cross <= 0, axis=1)
    nearest = np.argmin(d2, axis=1)
    return d2[np.arange(len(p)), nearest], nearest, inside


def _seg_d2(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    e, w = b - a, p - a
    ee = np.maximum(np.einsum("ij,ij->i", e, e), 1e-300)
    t = np.clip(np.einsum("ij,ij->i", w, e) / ee, 0.0, 1.0)
    diff = w - e * t[:, None]
    return np.einsum("ij,ij->i", diff, diff)


def _contour_pairs(seg: np.ndarray, pixels: np.ndarray, scale: float, width: int, height: int,
                   radius: float):
    """(segment, pixel slot, d2) for contour segments within ``radius`` of each pixel.

    ``seg`` is (S, 2, 2) and ``pixels`` a sorted array of flat indices
    (v * width + u); slots index into ``pixels``.
    """
    none = (np.zeros(0, dtype=np.int64),) * 2 + (np.zeros(0),)
    if len(seg) == 0 or len(pixels) == 0:
        return none
    tri = np.concatenate([seg, seg[:, 1:]], axis=1)
    s, px, py = _candidate_pairs(tri, scale, width, height, radius)
    flat = py * width + px
    slot = np.minimum(np.searchsorted(pixels, flat), len(pixels) - 1)
    hit = pixels[slot] == flat
    s, slot, px, py = s[hit], slot[hit], px[hit], py[hit]
    p = np.stack([px, py], axis=1).astype(np.float64) * scale
    d2 = _seg_d2(seg[s, 0], seg[s, 1], p)
    near = d2 < radius * radius
    return s[near], slot[near], d2[near]


def _window(d2: Dual, r2: float) -> Dual:
    """1 up to r2 / 4, then a quintic smoothstep down to 0 at r2."""
    lo = r2 / 4
    t = D.clip((d2 - lo) / (r2 - lo), 0.0, 1.0)
    return 1.0 - t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _soft_contour_d2(a: Dual, b: Dual, p: np.ndarray, slot: np.ndarray, n: int, r2: float) -> Dual:
    """Per-pixel smooth minimum of squared distances to nearby contour segments.

    (sum_j w_j d_j^(-2q))^(-1/q) with a smooth window w_j, so the value has
    no kink where the nearest segment changes (corners of the silhouette).
    It equals d^2 for a lone segment and never exceeds the true minimum by
    more than the window allows.
    """
    d2 = _edge_distance_dual(a, b, p)
    d2 = Dual(np.maximum(d2.val, 1e-30), d2.tan)
    # scale every term by the per-pixel minimum so the powers stay in range
    order = np.lexsort((d2.val, slot))
    first = order[np.r_[True, slot[order][1:] != slot[order][:-1]]]
    nearest = np.full(n, -1, dtype=np.int64)
    nearest[slot[first]] = first
    dmin = d2[nearest[slot]]
    terms = _window(d2, r2) * (d2 / dmin) ** (-SMOOTH_MIN_Q)
    k = d2.k
    total_val = np.bincount(slot, weights=terms.val, minlength=n)
    total_tan = np.stack([np.bincount(slot, weights=terms.tan[:, j], minlength=n) for j in range(k)],
                         axis=-1) if k else np.zeros((n, 0))
    total = Dual(np.maximum(total_val, 1e-12), total_tan)
    return d2[nearest] * total ** (-1.0 / SMOOTH_MIN_Q)


def _edge_distance_dual(a: Dual, b: Dual, p: np.ndarray) -> Dual:
    """Squared point-to-segment distance with tangents; clamped ends have a
    fixed foot parameter."""
    e = b - a
    w = a * -1.0 + p
    ee = D.dot3(e, e)
    t = D.clip(D.dot3(w, e) / Dual(np.maximum(ee.val, 1e-300), ee.tan), 0.0, 1.0)
    diff = w - e * t[:, None]
    return D.dot3(diff, diff)


def front_facing(mesh: TriMesh, camera: Camera) -> np.ndarray:
    """Faces whose outward (counter-clockwise) normal points toward the camera."""
    t = mesh.triangles
    n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
    return np.einsum("ij,ij->i", n, t[:, 0] - camera.pose.translation) < 0


def render_soft_silhouette(mesh: TriMesh, camera: Camera, cfg: SoftRasterConfig | None = None,
                           tangents=None) -> ProbMap:
    """Soft silhouette of ``mesh``; with ``tangents`` (V, 3, k) also d/d theta."""
    cfg = cfg or SoftRasterConfig()
    if len(mesh.faces) == 0 or len(mesh.vertices) == 0:
        raise EmptyMesh("mesh has no faces")
    verts = _to_dual_vertices(mesh, tangents)
    k = verts.k
    proj = _project_faces(verts, mesh.faces, camera)
    if len(proj.face_ids) == 0:
        raise AllFacesCulled("every face is behind the camera")
    W, H = camera.width, camera.height
    tri_val = proj.uv.val
    e1 = tri_val[:, 1] - tri_val[:, 0]
    e2 = tri_val[:, 2] - tri_val[:, 0]
    area2 = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    ok = area2 > 1e-14
    if cfg.cull_backfaces:
        facing = front_facing(mesh, camera)[proj.face_ids]
        if np.any(facing & ok):
            ok &= facing
    live = np.nonzero(ok)[0]
    radius = np.sqrt(CUTOFF * cfg.sigma)
    face, px, py = _candidate_pairs(tri_val[live], proj.scale, W, H, radius)
    values = np.zeros(H * W)
    tangent = np.zeros((H * W, k)) if tangents is not None else None
    if len(face) == 0:
        return ProbMap(values.reshape(H, W), None if tangent is None else tangent.reshape(H, W, k))
    p = np.stack([px, py], axis=1).astype(np.float64) * proj.scale
    fid = live[face]
    d2, edge, inside = _edge_values(tri_val[fid], p)
    if cfg.cull_backfaces:
        # inside the front-facing surface, measure to the silhouette contour
        # rather than to the face's own edges, so crossing an internal edge
        # leaves the coverage unchanged
        flags = contour_edges(mesh.faces[proj.face_ids[live]])
        c_face, c_edge = np.nonzero(flags)
        c_face = live[c_face]
        seg = np.stack([tri_val[c_face, c_edge], tri_val[c_face, (c_edge + 1) % 3]], axis=1)
        pix_in = np.unique((py * W + px)[inside])
        cs, cslot, _ = _contour_pairs(seg, pix_in, proj.scale, W, H, radius)
        covered = np.zeros(len(pix_in), dtype=bool)
        covered[cslot] = True
        soft = None
        if len(cs):
            cp = np.stack([pix_in[cslot] % W, pix_in[cslot] // W], axis=1).astype(np.float64) * proj.scale
            soft = _soft_contour_d2(proj.uv[c_face[cs], c_edge[cs]], proj.uv[c_face[cs], (c_edge[cs] + 1) % 3],
                                    cp, cslot, len(pix_in), radius * radius)
        slot = np.searchsorted(pix_in, py * W + px)
        deep = inside & ~covered[np.minimum(slot, len(pix_in) - 1)] if len(pix_in) else inside
        outer = ~inside
        near = deep | inside | (-d2 / cfg.sigma > -CUTOFF)
    else:
        deep = np.zeros(len(fid), dtype=bool)
        outer = np.ones(len(fid), dtype=bool)
        near = np.where(inside, d2, -d2) / cfg.sigma > -CUTOFF
    fid, edge, p, inside, deep, outer = fid[near], edge[near], p[near], inside[near], deep[near], outer[near]
    px, py, face = px[near], py[near], face[near]
    sign = np.where(inside, 1.0, -1.0)
    a = proj.uv[fid, edge]
    b = proj.uv[fid, (edge + 1) % 3]
    x = _edge_distance_dual(a, b, p) * (sign / cfg.sigma)
    if cfg.cull_backfaces and soft is not None:
        use = inside & ~deep
        if use.any():
            slot = np.searchsorted(pix_in, py * W + px)
            x = D.where(use, soft[np.minimum(slot, len(pix_in) - 1)] * (1.0 / cfg.sigma), x)
    if deep.any():
        # no contour segment within the cutoff radius: fully covered
        x = D.where(deep, Dual.constant(np.full(len(deep), CUTOFF), k), x)
    pix = py * W + px
    keep = np.ones(len(pix), dtype=bool)
    counts = np.bincount(pix[keep], minlength=H * W)
    if counts.max(initial=0) > cfg.max_faces_per_pixel:
        # per pixel keep the most-covering faces; order is (pixel, -x, face)
        idx = np.nonzero(keep)[0]
        order = idx[np.lexsort((face[idx], -x.val[idx], pix[idx]))]
        ps = pix[order]
        first = np.searchsorted(ps, ps, side="left")
        rank = np.arange(len(order)) - first
        keep = np.zeros_like(keep)
        keep[order[rank < cfg.max_faces_per_pixel]] = True
    sel = np.nonzero(keep)[0]
    log_bg = -D.softplus(x[sel])  # log(1 - p)
    S = np.bincount(pix[sel], weights=log_bg.val, minlength=H * W)
    bg = np.exp(S)
    values = 1.0 - bg
    if tangent is not None:
        for j in range(k):
            dS = np.bincount(pix[sel], weights=log_bg.tan[:, j], minlength=H * W)
            tangent[:, j] = -bg * dS
        tangent = tangent.reshape(H, W, k)
    return ProbMap(np.clip(values, 0.0, 1.0).reshape(H, W), tangent)


def render_hard_silhouette(mesh: TriMesh, camera: Camera) -> BinaryMask:
    """True where a pixel center lies inside any in-front projected triangle."""
    if len(mesh.faces) == 0 or len(mesh.vertices) == 0:
        raise EmptyMesh("mesh has no faces")
    W, H = camera.width, camera.height
    bits = np.zeros(H * W, dtype=bool)
    proj = _project_faces(Dual.constant(mesh.vertices, 0), mesh.faces, camera)
    if len(proj.face_ids) == 0:
        return BinaryMask(bits.reshape(H, W))
    tri_val = proj.uv.val
    face, px, py = _candidate_pairs(tri_val, proj.scale, W, H, 0.0)
    if len(face) == 0:
        return BinaryMask(bits.reshape(H, W))
    p = np.stack([px, py], axis=1).astype(np.float64) * proj.scale
    t = tri_val[face]
    c = np.stack([
        (t[:, (i + 1) % 3, 0] - t[:, i, 0]) * (p[:, 1] - t[:, i, 1])
        - (t[:, (i + 1) % 3, 1] - t[:, i, 1]) * (p[:, 0] - t[:, i, 0])
        for i in range(3)
    ], axis=1)
    e1 = t[:, 1] - t[:, 0]
    e2 = t[:, 2] - t[:, 0]
    nondegenerate = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) > 1e-14
    inside = (np.all(c >= 0, axis=1) | np.all(c <= 0, axis=1)) & nondegenerate
    bits[(py * W + px)[inside]] = True
    return BinaryMask(bits.reshape(H, W))

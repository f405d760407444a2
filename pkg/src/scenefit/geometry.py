"""Geometric vocabulary: cameras, meshes, point clouds, masks, boxes.

Conventions:
    * World units are meters. World +Y is up.
    * Camera frame is +X right, +Y down, +Z forward (OpenCV style).
    * ``Camera.pose`` maps camera coordinates to world coordinates.
    * Pixel (u, v) addresses the center of the cell at column u, row v.

All types are frozen dataclasses whose arrays are made read-only on
construction, so instances can be shared between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import DepthNonPositive, EmptyInput, ShapeMismatch, ValidationError

MIN_DEPTH = 1e-9
DEGENERATE_AREA = 1e-12


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def rot_y(angle: float) -> np.ndarray:
    """Right-handed rotation about +Y: (1, 0, 0) -> (cos a, 0, -sin a)."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about an arbitrary axis."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


@dataclass(frozen=True)
class RigidTransform:
    """x_out = rotation @ x_in + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if R.shape != (3, 3):
            raise ValidationError(f"rotation must be 3x3, got {R.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ValidationError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point outside the image")

    @classmethod
    def look_at(cls, eye, target, *, width: int, height: int, fov_x_deg: float = 60.0,
                up=(0.0, 1.0, 0.0)) -> Camera:
        """Pinhole camera at ``eye`` looking at ``target`` with world ``up``."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=np.float64)
        y = -(up - np.dot(up, z) * z)
        y /= np.linalg.norm(y)
        x = np.cross(y, z)
        f = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height,
                   RigidTransform(np.stack([x, y, z], axis=1), eye))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_camera(self, points) -> np.ndarray:
        return self.pose.inverse().apply(points)

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized projection; no depth check. Returns ``(pixels, depth)``."""
        pc = self.to_camera(np.atleast_2d(points))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def backproject(self, pixels, depth) -> np.ndarray:
        """Vectorized inverse of :meth:`project`, returns world points."""
        px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        d = np.asarray(depth, dtype=np.float64).reshape(-1)
        pc = np.stack([(px[:, 0] - self.cx) / self.fx * d,
                       (px[:, 1] - self.cy) / self.fy * d, d], axis=1)
        return self.pose.apply(pc)

    def pixel_grid(self) -> np.ndarray:
        """(H, W, 2) array of pixel-center coordinates (u, v)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([u, v], axis=-1)

    def up_vector(self) -> np.ndarray:
        """World direction of camera up (camera -Y)."""
        return -self.pose.rotation[:, 1]


def project_point(camera: Camera, p) -> tuple[np.ndarray, float]:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValidationError("point is not finite")
    pixels, depth = camera.project(p.reshape(1, 3))
    if depth[0] <= MIN_DEPTH:
        raise DepthNonPositive(f"point has camera depth {depth[0]:g}")
    return pixels[0], float(depth[0])


def backproject_pixel(camera: Camera, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise DepthNonPositive(f"depth must be positive, got {depth}")
    return camera.backproject(np.asarray(pixel, dtype=np.float64).reshape(1, 2), [depth])[0]


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        v = _frozen(self.vertices).reshape(-1, 3)
        f = _frozen(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValidationError("mesh has non-finite vertices")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValidationError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.colors is not None:
            c = _frozen(self.colors).reshape(-1, 3)
            if len(c) != len(v):
                raise ShapeMismatch("per-vertex colors must match vertex count")
            object.__setattr__(self, "colors", c)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def cleaned(self) -> TriMesh:
        """Drop faces with area <= 1e-12 m²."""
        keep = self.face_areas() > DEGENERATE_AREA
        if keep.all():
            return self
        return TriMesh(self.vertices, self.faces[keep], self.colors)

    def with_vertices(self, vertices) -> TriMesh:
        return TriMesh(vertices, self.faces, self.colors)

    def transformed(self, T: RigidTransform) -> TriMesh:
        return self.with_vertices(T.apply(self.vertices))

    def sample_surface(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Area-weighted uniform samples. Returns ``(points, face_ids)``."""
        areas = self.face_areas()
        total = areas.sum()
        if not total > 0:
            raise EmptyInput("mesh has zero surface area")
        face_ids = rng.choice(len(areas), size=n, p=areas / total)
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        b = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
        tri = self.triangles[face_ids]
        return np.einsum("ni,nij->nj", b, tri), face_ids

    @staticmethod
    def merge(meshes) -> TriMesh:
        verts, faces, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + off)
            off += len(m.vertices)
        if not verts:
            raise EmptyInput("nothing to merge")
        return TriMesh(np.concatenate(verts), np.concatenate(faces))


def unit_cube(center=(0.0, 0.0, 0.0), size: float = 1.0) -> TriMesh:
    """Axis-aligned cube, 8 vertices and 12 outward-wound faces."""
    h = size / 2
    c = np.asarray(center, dtype=np.float64)
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)]) + c
    f = [
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ]
    return TriMesh(v, f)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    confidence: np.ndarray | None = None

    def __post_init__(self):
        p = _frozen(self.points).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValidationError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", p)
        if self.confidence is not None:
            c = _frozen(self.confidence).reshape(-1)
            if len(c) != len(p):
                raise ShapeMismatch("confidence length differs from point count")
            object.__setattr__(self, "confidence", c)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class OrganizedPointMap:
    """Pixel-aligned grid of 3D points; ``points[v, u]`` belongs to pixel (u, v)."""

    points: np.ndarray
    confidence: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64)
        c = np.array(self.confidence, dtype=np.float64)
        ok = np.array(self.valid, dtype=bool) & np.all(np.isfinite(p), axis=-1)
        if p.ndim != 3 or p.shape[2] != 3 or c.shape != p.shape[:2] or ok.shape != p.shape[:2]:
            raise ShapeMismatch("point map grid dimensions disagree")
        c[~ok] = 0.0
        object.__setattr__(self, "points", _frozen(p))
        object.__setattr__(self, "confidence", _frozen(c))
        object.__setattr__(self, "valid", _frozen(ok, dtype=bool))

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_depth(cls, camera: Camera, depth: np.ndarray, confidence=None) -> OrganizedPointMap:
        """Back-project a depth image; non-positive or non-finite depth is invalid."""
        depth = np.asarray(depth, dtype=np.float64)
        ok = np.isfinite(depth) & (depth > 0)
        d = np.where(ok, depth, 1.0)
        pts = camera.backproject(camera.pixel_grid().reshape(-1, 2), d.reshape(-1))
        pts = pts.reshape(camera.height, camera.width, 3)
        pts[~ok] = np.nan
        conf = np.ones_like(depth) if confidence is None else confidence
        return cls(pts, conf, ok)


@dataclass(frozen=True)
class BinaryMask:
    """``bits[v, u]`` is pixel (u, v)."""

    bits: np.ndarray

    def __post_init__(self):
        b = _frozen(self.bits, dtype=bool)
        if b.ndim != 2:
            raise ShapeMismatch("mask must be 2D")
        object.__setattr__(self, "bits", b)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo, hi = _frozen(self.min).reshape(3), _frozen(self.max).reshape(3)
        if np.any(lo > hi):
            raise ValidationError("aabb min exceeds max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def volume(self) -> float:
        return float(np.prod(self.extent))


@dataclass(frozen=True)
class Obb:
    """Oriented box. ``axes[:, i]`` is the i-th axis, right-handed."""

    center: np.ndarray
    axes: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        A = _frozen(self.axes)
        if np.abs(A.T @ A - np.eye(3)).max() > 1e-9:
            raise ValidationError("obb axes are not orthonormal")
        h = _frozen(self.half_extents).reshape(3)
        if np.any(h < 0):
            raise ValidationError("negative half extent")
        object.__setattr__(self, "center", _frozen(self.center).reshape(3))
        object.__setattr__(self, "axes", A)
        object.__setattr__(self, "half_extents", h)

    def volume(self) -> float:
        return float(8 * np.prod(self.half_extents))

    def local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.axes

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        return np.all(np.abs(self.local(points)) <= self.half_extents + tol, axis=-1)


def _as_points(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.points
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def compute_aabb(points) -> Aabb:
    p = _as_points(points)
    if len(p) == 0:
        raise EmptyInput("cannot bound zero points")
    return Aabb(p.min(axis=0), p.max(axis=0))


def _min_area_rect_angle(xy: np.ndarray) -> float:
    """Angle of the minimum-area enclosing rectangle of 2D points (rotating calipers)."""
    try:
        hull = xy[ConvexHull(xy).vertices]
    except (QhullError, ValueError):
        return 0.0
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.unique(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2))
    best, best_area = 0.0, np.inf
    for a in angles:
        c, s = np.cos(a), np.sin(a)
        r = hull @ np.array([[c, -s], [s, c]])
        area = np.prod(r.max(axis=0) - r.min(axis=0))
        if area < best_area - 1e-12:
            best, best_area = a, area
    return float(best)


def _box_volume(p: np.ndarray, axes: np.ndarray) -> float:
    q = p @ axes
    return float(np.prod(q.max(axis=0) - q.min(axis=0)))


def _refine_degenerate_axes(p: np.ndarray, evals: np.ndarray, evecs: np.ndarray) -> np.ndarray:
    """Pick a tight basis inside degenerate covariance eigenspaces.

    When eigenvalues repeat, any basis of the repeated eigenspace is a valid
    eigenbasis; choose the one giving the smallest box.
    """
    scale = max(evals.max(), 1e-300)
    close01 = abs(evals[0] - evals[1]) <= 1e-6 * scale
    close12 = abs(evals[1] - evals[2]) <= 1e-6 * scale
    if evals[0] <= 1e-12 * scale and evals[1] <= 1e-12 * scale:
        return evecs  # collinear: only the principal direction is meaningful
    if close01 and close12:
        # isotropic: try convex-hull face normals as one axis
        try:
            hull = ConvexHull(p)
            normals = np.unique(np.round(hull.equations[:, :3], 9), axis=0)
        except (QhullError, ValueError):
            normals = evecs.T
        best, best_vol = evecs, _box_volume(p, evecs)
        for n in normals:
            n = n / np.linalg.norm(n)
            a = np.cross(n, [1.0, 0.0, 0.0])
            if np.linalg.norm(a) < 1e-6:
                a = np.cross(n, [0.0, 1.0, 0.0])
            a /= np.linalg.norm(a)
            b = np.cross(n, a)
            ang = _min_area_rect_angle(np.stack([p @ a, p @ b], axis=1))
            u = np.cos(ang) * a + np.sin(ang) * b
            cand = np.stack([u, np.cross(n, u), n], axis=1)
            vol = _box_volume(p, cand)
            if vol < best_vol - 1e-12:
                best, best_vol = cand, vol
        return best
    if close01 or close12:
        # two-fold: rotate within the repeated pair
        pair = [0, 1] if close01 else [1, 2]
        a, b = evecs[:, pair[0]], evecs[:, pair[1]]
        ang = _min_area_rect_angle(np.stack([p @ a, p @ b], axis=1))
        out = evecs.copy()
        out[:, pair[0]] = np.cos(ang) * a + np.sin(ang) * b
        out[:, pair[1]] = -np.sin(ang) * a + np.cos(ang) * b
        return out
    return evecs


def compute_obb(points) -> Obb:
    """Covariance-eigenbasis OBB; axes sorted by descending extent.

    Degenerate (flat or collinear) inputs get zero extents on the missing
    directions, and the frame is completed by cross products.
    """
    p = _as_points(points)
    if len(p) == 0:
        raise EmptyInput("cannot bound zero points")
    mean = p.mean(axis=0)
    q = p - mean
    cov = q.T @ q / len(p)
    evals, evecs = np.linalg.eigh(cov)
    evecs = _refine_degenerate_axes(q, evals, evecs)
    proj = q @ evecs
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    order = np.argsort(-(hi - lo), kind="stable")
    axes = evecs[:, order]
    lo, hi = lo[order], hi[order]
    a0 = axes[:, 0] / np.linalg.norm(axes[:, 0])
    a1 = axes[:, 1] - np.dot(axes[:, 1], a0) * a0
    a1 /= np.linalg.norm(a1)
    a2 = np.cross(a0, a1)
    if np.dot(a2, axes[:, 2]) < 0:
        lo[2], hi[2] = -hi[2], -lo[2]
    axes = np.stack([a0, a1, a2], axis=1)
    center = mean + axes @ ((lo + hi) / 2)
    half = (hi - lo) / 2
    # recompute extents in the orthonormalized frame for exact containment
    loc = (p - center) @ axes
    half = np.maximum(half, np.abs(loc).max(axis=0))
    return Obb(center, axes, half)

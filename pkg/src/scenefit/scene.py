"""Scene-level geometry: floor plane, plane frames, stenciling, registration."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import (
    Diverged,
    EmptyInput,
    InsufficientPoints,
    NoConsensus,
    ShapeMismatch,
    ValidationError,
)
from .geometry import Aabb, BinaryMask, OrganizedPointMap, PointCloud, RigidTransform, compute_aabb

logger = logging.getLogger(__name__)

WORLD_UP = np.array([0.0, 1.0, 0.0])


def plane_local_frame(normal, origin) -> RigidTransform:
    """World-from-plane frame with local Y = normal and origin on the plane.

    Local X is world X projected onto the plane (world Z when X is within 1e-6
    of the normal), and local Z = X x Y.
    """
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    x = np.array([1.0, 0.0, 0.0])
    x = x - np.dot(x, n) * n
    if np.linalg.norm(x) < 1e-6:
        x = np.array([0.0, 0.0, 1.0])
        x = x - np.dot(x, n) * n
    x /= np.linalg.norm(x)
    z = np.cross(x, n)
    return RigidTransform(np.stack([x, n, z], axis=1), origin)


@dataclass(frozen=True)
class Plane:
    n: np.ndarray
    p0: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValidationError("plane normal must be non-zero")
        n = n / norm
        n.setflags(write=False)
        p0 = np.array(self.p0, dtype=np.float64).reshape(3)
        p0.setflags(write=False)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "p0", p0)

    @property
    def frame(self) -> RigidTransform:
        return plane_local_frame(self.n, self.p0)

    def signed_distance(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.p0) @ self.n


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 512
    inlier_threshold: float | None = None  # None: 0.01 x cloud AABB diagonal
    min_inlier_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.inlier_threshold is not None and not self.inlier_threshold > 0:
            raise ValidationError("inlier_threshold must be positive")


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 100
    convergence_eps: float = 1e-10
    max_correspondence_dist: float | None = None  # None: 0.1 x dst AABB diagonal
    translation_only: bool = False
    # start from the centroid shift instead of the identity
    init_centroids: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if not self.convergence_eps > 0:
            raise ValidationError("convergence_eps must be positive")


def _points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def _fit_plane_lsq(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = p.mean(axis=0)
    _, _, vt = np.linalg.svd(p - c, full_matrices=False)
    return vt[-1], c


def _orient(n: np.ndarray, camera_up) -> np.ndarray:
    d = float(np.dot(n, WORLD_UP))
    if abs(d) < 1e-6 and camera_up is not None:
        d = float(np.dot(n, camera_up))
    return -n if d < 0 else n


def ransac_plane(points, cfg: RansacConfig | None = None, camera_up=None) -> Plane:
    """Robust plane fit: best of ``cfg.iterations`` 3-point hypotheses, then
    least squares over its inliers. The normal is oriented toward world +Y
    (or ``camera_up`` when the plane is vertical)."""
    cfg = cfg or RansacConfig()
    p = _points(points)
    if len(p) < 3:
        raise InsufficientPoints(f"plane fit needs 3 points, got {len(p)}")
    thr = cfg.inlier_threshold
    if thr is None:
        thr = 0.01 * max(compute_aabb(p).diagonal, 1e-12)
    rng = np.random.default_rng(cfg.seed)
    best_count, best = -1, None
    for _ in range(cfg.iterations):
        i, j, k = rng.choice(len(p), size=3, replace=False)
        n = np.cross(p[j] - p[i], p[k] - p[i])
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n /= norm
        count = int(np.count_nonzero(np.abs((p - p[i]) @ n) <= thr))
        if count > best_count:
            best_count, best = count, (n, p[i])
    if best is None:
        raise NoConsensus("all sampled triples were collinear")
    n, p0 = best
    inliers = np.abs((p - p0) @ n) <= thr
    if inliers.sum() / len(p) < cfg.min_inlier_fraction:
        raise NoConsensus(f"best inlier fraction {inliers.mean():.3f} below {cfg.min_inlier_fraction}")
    if inliers.sum() >= 3:
        n, p0 = _fit_plane_lsq(p[inliers])
    return Plane(_orient(n, camera_up), p0)


def stencil_pointmap(pm: OrganizedPointMap, mask: BinaryMask, min_confidence: float = 0.0) -> PointCloud:
    """Points of valid masked pixels with confidence >= ``min_confidence``, row-major order."""
    if (pm.height, pm.width) != mask.shape:
        raise ShapeMismatch(f"point map {(pm.height, pm.width)} vs mask {mask.shape}")
    sel = mask.bits & pm.valid & (pm.confidence >= min_confidence)
    return PointCloud(pm.points[sel], pm.confidence[sel])


def background_bounds(bg, percentile: float = 0.005) -> Aabb:
    """Per-axis [percentile, 1 - percentile] quantile box."""
    p = _points(bg)
    if len(p) == 0:
        raise EmptyInput("background cloud is empty")
    if not 0 <= percentile < 0.5:
        raise ValidationError("percentile must lie in [0, 0.5)")
    if percentile == 0:
        return compute_aabb(p)
    return Aabb(np.quantile(p, percentile, axis=0), np.quantile(p, 1 - percentile, axis=0))


def _kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    # re-orthonormalize to keep det exactly +1 within tolerance
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(R, cd - R @ cs)


def icp_align(src, dst, cfg: IcpConfig | None = None) -> tuple[RigidTransform, float]:
    """Point-to-point ICP mapping ``src`` onto ``dst``; returns (transform, rms)."""
    cfg = cfg or IcpConfig()
    s, d = _points(src), _points(dst)
    need = 1 if cfg.translation_only else 3
    if len(s) < need or len(d) < need:
        raise InsufficientPoints(f"ICP needs >= {need} points per cloud")
    max_dist = cfg.max_correspondence_dist
    if max_dist is None:
        max_dist = 0.1 * max(compute_aabb(d).diagonal, 1e-12)
    tree = cKDTree(d)
    T = RigidTransform.identity()
    if cfg.init_centroids:
        T = RigidTransform(np.eye(3), d.mean(axis=0) - s.mean(axis=0))

    def residuals(T):
        cur = T.apply(s)
        dist, idx = tree.query(cur)
        ok = dist <= max_dist
        if ok.sum() < need:
            ok = np.ones(len(cur), dtype=bool)
        # truncated-quadratic objective: monotone under ICP with rejection
        robust = float(np.sqrt(np.mean(np.minimum(dist, max_dist) ** 2)))
        return cur, dist, idx, ok, robust

    prev, grow = np.inf, 0
    for it in range(cfg.max_iterations):
        cur, dist, idx, ok, robust = residuals(T)
        if robust > prev * (1 + 1e-12) + 1e-15:
            grow += 1
            if grow >= 5:
                raise Diverged(f"ICP objective grew for 5 iterations ({robust:g})")
        else:
            grow = 0
        if abs(prev - robust) < cfg.convergence_eps:
            break
        prev = robust
        if cfg.translation_only:
            step = RigidTransform(np.eye(3), (d[idx[ok]] - cur[ok]).mean(axis=0))
        else:
            step = _kabsch(cur[ok], d[idx[ok]])
        T = step.compose(T)
    cur, dist, idx, ok, robust = residuals(T)
    rms = float(np.sqrt(np.mean(dist[ok] ** 2)))
    logger.debug("icp finished after %d iterations, rms=%.3g", it + 1, rms)
    return T, rms


def dilate(mask: BinaryMask, px: int) -> np.ndarray:
    """Square (Chebyshev) dilation by ``px`` pixels."""
    if px <= 0:
        return mask.bits.copy()
    return ndimage.binary_dilation(mask.bits, structure=np.ones((2 * px + 1, 2 * px + 1), dtype=bool))


def mask_iou(a: BinaryMask, b: BinaryMask, dilation_px: int = 0) -> float:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask sizes differ: {a.shape} vs {b.shape}")
    if dilation_px < 0:
        raise ValidationError("dilation must be non-negative")
    A, B = dilate(a, dilation_px), dilate(b, dilation_px)
    union = np.count_nonzero(A | B)
    if union == 0:
        return 0.0
    return np.count_nonzero(A & B) / union

"""Composite pose-fitting loss: silhouette (Dice + Focal), point-to-mesh, bbox.

Every term accepts dual-valued inputs and returns a :class:`~scenefit.dual.Dual`
scalar, so the gradient with respect to the active pose parameters comes out
of the same evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dual as D
from .bvh import TriangleBVH
from .dual import Dual
from .errors import EmptyInput, ShapeMismatch, ValidationError
from .geometry import Aabb, BinaryMask, PointCloud, TriMesh
from .raster import ProbMap

DICE_EPS = 1e-9
FOCAL_CLAMP = 1e-6


@dataclass(frozen=True)
class LossWeights:
    w_sil: float = 1.0
    w_3d: float = 1.0
    w_bbox: float = 0.1
    lambda_dice: float = 1.0
    lambda_focal: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in ("w_sil", "w_3d", "w_bbox", "lambda_dice", "lambda_focal", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if not 0 < self.focal_alpha < 1:
            raise ValidationError("focal_alpha must lie in (0, 1)")
        if self.w_sil <= 0 and self.w_3d <= 0:
            raise ValidationError("one of w_sil, w_3d must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    silhouette: float
    geometric: float
    bbox: float
    total: float
    gradient: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def as_row(self) -> dict:
        return {"silhouette": self.silhouette, "geometric": self.geometric,
                "bbox": self.bbox, "total": self.total}


def _pred_target(pred, target: BinaryMask) -> tuple[Dual, np.ndarray]:
    p = pred.as_dual() if isinstance(pred, ProbMap) else pred
    if not isinstance(p, Dual):
        p = Dual.constant(p, 0)
    m = target.bits if isinstance(target, BinaryMask) else np.asarray(target, dtype=bool)
    if p.shape != m.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs target {m.shape}")
    return p, m.astype(np.float64)


def dice_loss(pred, target: BinaryMask) -> Dual:
    """1 - (2 sum(p m) + eps) / (sum p + sum m + eps)."""
    p, m = _pred_target(pred, target)
    inter = (p * m).sum()
    return 1.0 - (inter * 2.0 + DICE_EPS) / (p.sum() + (m.sum() + DICE_EPS))


def focal_loss(pred, target: BinaryMask, alpha: float = 0.25, gamma: float = 2.0) -> Dual:
    """Pixel-mean binary focal loss on predictions squeezed into [1e-6, 1 - 1e-6].

    The squeeze is the affine map p -> eps + (1 - 2 eps) p rather than a hard
    clip: a clip puts a kink in the loss wherever a saturated pixel crosses
    the bound, and those kinks spoil finite-difference agreement.
    """
    p, m = _pred_target(pred, target)
    p = p * (1.0 - 2.0 * FOCAL_CLAMP) + FOCAL_CLAMP
    q = 1.0 - p
    pos = (q ** gamma if gamma else Dual.constant(np.ones(p.shape), p.k)) * D.log(p) * (-alpha)
    neg = (p ** gamma if gamma else Dual.constant(np.ones(p.shape), p.k)) * D.log(q) * (alpha - 1.0)
    return D.where(m > 0, pos, neg).mean()


def point_to_mesh_loss(targets, mesh: TriMesh, tangents=None, bvh: TriangleBVH | None = None) -> Dual:
    """Mean squared distance from each target point to the nearest mesh triangle.

    The nearest triangle and the barycentric foot point are held fixed while
    differentiating, which gives the exact gradient of the squared distance.
    """
    pts = targets.points if isinstance(targets, PointCloud) else np.asarray(targets, dtype=np.float64)
    if len(pts) == 0 or len(mesh.faces) == 0:
        raise EmptyInput("point-to-mesh needs points and faces")
    bvh = bvh or TriangleBVH(mesh.vertices, mesh.faces)
    _, face, bary = bvh.nearest(pts)
    verts = Dual.constant(mesh.vertices, 0) if tangents is None else Dual(mesh.vertices, tangents)
    corner = mesh.faces[face]  # (N, 3)
    foot = (verts[corner[:, 0]] * bary[:, 0:1] + verts[corner[:, 1]] * bary[:, 1:2]
            + verts[corner[:, 2]] * bary[:, 2:3])
    diff = foot - pts
    return D.dot3(diff, diff).mean()


def bbox_loss(vertices, bbox: Aabb) -> Dual:
    """Mean over vertices of squared X/Z excursions outside ``bbox``; Y is exempt."""
    v = vertices if isinstance(vertices, Dual) else Dual.constant(vertices, 0)
    total = None
    for a in (0, 2):
        va = v[:, a]
        term = D.maximum0(va - bbox.max[a]) ** 2 + D.maximum0((va * -1.0) + bbox.min[a]) ** 2
        total = term if total is None else total + term
    return total.mean()


def total_loss(pred, target_mask: BinaryMask, target_cloud, mesh: TriMesh, bbox: Aabb | None,
               weights: LossWeights, tangents=None, bvh: TriangleBVH | None = None) -> LossBreakdown:
    """Weighted sum of the three terms; ``mesh`` is already transformed.

    A zero weight skips its term entirely. ``bbox=None`` disables the box term.
    """
    k = 0 if tangents is None else np.asarray(tangents).shape[-1]
    zero = Dual.constant(0.0, k)
    sil = zero
    if weights.w_sil > 0:
        sil = (dice_loss(pred, target_mask) * weights.lambda_dice
               + focal_loss(pred, target_mask, weights.focal_alpha, weights.focal_gamma)
               * weights.lambda_focal)
    geo = zero
    if weights.w_3d > 0:
        geo = point_to_mesh_loss(target_cloud, mesh, tangents, bvh)
    box = zero
    if weights.w_bbox > 0 and bbox is not None:
        verts = Dual.constant(mesh.vertices, k) if tangents is None else Dual(mesh.vertices, tangents)
        box = bbox_loss(verts, bbox)
    total = sil * weights.w_sil + geo * weights.w_3d + box * weights.w_bbox

    def grad(x: Dual) -> np.ndarray:
        g = np.asarray(x.tan, dtype=np.float64).reshape(-1)
        return g if g.size == k else np.zeros(k)

    return LossBreakdown(float(sil.val), float(geo.val), float(box.val), float(total.val), grad(total))

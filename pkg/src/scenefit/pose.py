"""Pose models, initialization and gradient-based fitting.

Two parameterizations place an asset mesh in the scene:

* ``Regular5``: world translation (3), yaw about world +Y, uniform scale,
  pivoting about the mesh's OBB center.
* ``Planar4``: in-plane translation (2), yaw about the floor normal and
  uniform scale, all applied in the floor's plane-local frame. The local
  translation is (t_x, 0, t_z), so an object seated on the floor stays on it.

Scale is optimized as log(s); gradients come from forward-mode tangents
pushed through the renderer and the losses.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyInput, MissingPlane, NonFinite, NumericalError, ShapeMismatch
from .geometry import Aabb, BinaryMask, Camera, PointCloud, TriMesh, compute_obb, rot_y
from .losses import LossBreakdown, LossWeights, total_loss
from .raster import ProbMap, SoftRasterConfig, render_soft_silhouette
from .scene import Plane, mask_iou

logger = logging.getLogger(__name__)


class ModelVariant(str, enum.Enum):
    PLANAR4 = "planar4"
    REGULAR5 = "regular5"


@dataclass(frozen=True)
class PoseParams5:
    t: tuple[float, float, float] = (0.0, 0.0, 0.0)
    r_y: float = 0.0
    s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "t", tuple(float(x) for x in self.t))
        if not self.s > 0 or not all(math.isfinite(x) for x in (*self.t, self.r_y, self.s)):
            raise ValueError("pose parameters must be finite with s > 0")

    def vector(self) -> np.ndarray:
        return np.array([*self.t, self.r_y, self.s])

    @classmethod
    def from_vector(cls, v) -> PoseParams5:
        return cls((v[0], v[1], v[2]), float(v[3]), float(v[4]))


@dataclass(frozen=True)
class PoseParams4:
    """Plane-local pose. ``ground_offset`` is a fixed (non-learned) local-Y
    shift chosen at initialization to seat the mesh on the plane."""

    t_x: float = 0.0
    t_z: float = 0.0
    r_y: float = 0.0
    s: float = 1.0
    ground_offset: float = 0.0

    def __post_init__(self):
        if not self.s > 0 or not all(math.isfinite(x) for x in (self.t_x, self.t_z, self.r_y, self.s)):
            raise ValueError("pose parameters must be finite with s > 0")

    def vector(self) -> np.ndarray:
        return np.array([self.t_x, self.t_z, self.r_y, self.s])

    def from_vector(self, v) -> PoseParams4:
        return replace(self, t_x=float(v[0]), t_z=float(v[1]), r_y=float(v[2]), s=float(v[3]))


def _drot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def apply_pose_regular(mesh: TriMesh, p: PoseParams5, with_tangents: bool = False,
                       pivot=None):
    """v' = R_y(r_y) s (v - c) + c + t, with c the OBB center unless ``pivot`` is given.

    With tangents, returns ``(mesh, tangents)`` where tangents[v, :, j] is
    d v' / d (t_x, t_y, t_z, r_y, s)[j].
    """
    c = compute_obb(mesh.vertices).center if pivot is None else np.asarray(pivot, dtype=np.float64)
    if p.r_y == 0.0 and p.s == 1.0 and p.t == (0.0, 0.0, 0.0):
        out = mesh.vertices
    else:
        R = rot_y(p.r_y)
        out = (mesh.vertices - c) @ (p.s * R).T + c + np.asarray(p.t)
    moved = mesh.with_vertices(out)
    if not with_tangents:
        return moved
    d = mesh.vertices - c
    tan = np.zeros((len(d), 3, 5))
    tan[:, :, 0:3] = np.eye(3)
    tan[:, :, 3] = d @ (p.s * _drot_y(p.r_y)).T
    tan[:, :, 4] = d @ rot_y(p.r_y).T
    return moved, tan


def footprint_center(local: np.ndarray, rel_tol: float = 0.01) -> np.ndarray:
    """Local-XZ centroid of the bottom vertices, with local Y at the minimum."""
    y = local[:, 1]
    ymin = y.min()
    tol = max(rel_tol * (y.max() - ymin), 1e-9)
    bottom = local[y <= ymin + tol]
    return np.array([bottom[:, 0].mean(), ymin, bottom[:, 2].mean()])


def apply_pose_planar(mesh: TriMesh, p: PoseParams4, plane: Plane, with_tangents: bool = False,
                      pivot=None):
    """Map to plane-local space, scale and yaw about the footprint center,
    translate by (t_x, ground_offset, t_z) and map back to world.

    The pivot sits at the minimum local Y, so the lowest vertex keeps its
    plane-local height under all four parameters. Tangents are
    d v' / d (t_x, t_z, r_y, s).
    """
    F = plane.frame
    Rf = F.rotation
    local = (mesh.vertices - F.translation) @ Rf
    f = footprint_center(local) if pivot is None else np.asarray(pivot, dtype=np.float64)
    d = local - f
    R = rot_y(p.r_y)
    shift = np.array([p.t_x, p.ground_offset, p.t_z])
    if p.r_y == 0.0 and p.s == 1.0:
        moved_local = local + shift  # pure translation stays exact
    else:
        moved_local = d @ (p.s * R).T + f + shift
    moved = mesh.with_vertices(moved_local @ Rf.T + F.translation)
    if p.r_y == 0.0 and p.s == 1.0 and p.t_x == 0.0 and p.t_z == 0.0 and p.ground_offset == 0.0:
        moved = mesh
    if not with_tangents:
        return moved
    tan = np.zeros((len(d), 3, 4))
    tan[:, :, 0] = Rf[:, 0]
    tan[:, :, 1] = Rf[:, 2]
    tan[:, :, 2] = (d @ (p.s * _drot_y(p.r_y)).T) @ Rf.T
    tan[:, :, 3] = (d @ R.T) @ Rf.T
    return moved, tan


def plane_local_min_y(vertices: np.ndarray, plane: Plane) -> float:
    return float(plane.signed_distance(vertices).min())


def select_model(obj_mask: BinaryMask, floor_mask: BinaryMask, dilation_px: int = 2) -> ModelVariant:
    """Planar4 iff the (dilated) object and floor masks overlap."""
    if obj_mask.shape != floor_mask.shape:
        raise ShapeMismatch("object and floor masks differ in size")
    if mask_iou(obj_mask, floor_mask, dilation_px) > 0:
        return ModelVariant.PLANAR4
    return ModelVariant.REGULAR5


def _horizontal_angle(obb, frame_rotation=None) -> tuple[float, bool]:
    """Yaw angle of the OBB axis with the largest horizontal extent.

    Returns (angle, tied) where ``tied`` means the two largest horizontal
    extents agree within 5%, so the angle is only defined modulo pi/2.
    """
    axes = obb.axes if frame_rotation is None else frame_rotation.T @ obb.axes
    horiz = np.stack([axes[0], axes[2]], axis=0)  # (2, 3) XZ components
    ext = np.linalg.norm(horiz, axis=0) * obb.half_extents
    order = np.argsort(-ext, kind="stable")
    i = order[0]
    tied = ext[order[1]] >= 0.95 * ext[i] and ext[i] > 0
    dx, dz = horiz[0, i], horiz[1, i]
    return math.atan2(-dz, dx), bool(tied)


def _canonical_yaw(angle: float, period: float) -> float:
    """Equivalent angle modulo ``period`` with the smallest magnitude."""
    a = math.remainder(angle, period)
    if abs(abs(a) - period / 2) < 1e-9:
        a = abs(a)
    return a


def _yaw_between(src_obb, dst_obb, frame_rotation=None) -> float:
    a_src, tie_src = _horizontal_angle(src_obb, frame_rotation)
    a_dst, tie_dst = _horizontal_angle(dst_obb, frame_rotation)
    period = math.pi / 2 if (tie_src or tie_dst) else math.pi
    return _canonical_yaw(a_dst - a_src, period)


def _extent_ratio(src_obb, dst_obb) -> float:
    s_ext = 2 * src_obb.half_extents.max()
    d_ext = 2 * dst_obb.half_extents.max()
    if not s_ext > 0 or not d_ext > 0:
        return 1.0
    return float(d_ext / s_ext)


def init_regular(mesh: TriMesh, target) -> PoseParams5:
    """Align the mesh OBB with the target-cloud OBB."""
    pts = target.points if isinstance(target, PointCloud) else np.asarray(target)
    if len(mesh.vertices) == 0 or len(pts) == 0:
        raise EmptyInput("init_regular needs a mesh and a target cloud")
    m_obb, t_obb = compute_obb(mesh.vertices), compute_obb(pts)
    s = _extent_ratio(m_obb, t_obb)
    r = _yaw_between(m_obb, t_obb)
    t = t_obb.center - m_obb.center
    return PoseParams5(tuple(t), r, s)


def init_planar(mesh: TriMesh, plane: Plane, target) -> PoseParams4:
    """Seat the mesh bottom on the plane and center its footprint on the
    target's plane-local centroid; scale from the OBB extent ratio."""
    pts = target.points if isinstance(target, PointCloud) else np.asarray(target)
    if len(mesh.vertices) == 0 or len(pts) == 0:
        raise EmptyInput("init_planar needs a mesh and a target cloud")
    F = plane.frame
    local = (mesh.vertices - F.translation) @ F.rotation
    f = footprint_center(local)
    c = ((pts - F.translation) @ F.rotation).mean(axis=0)
    s = _extent_ratio(compute_obb(mesh.vertices), compute_obb(pts))
    return PoseParams4(t_x=float(c[0] - f[0]), t_z=float(c[2] - f[2]), r_y=0.0, s=s,
                       ground_offset=float(-f[1]))


class Adam:
    """Bias-corrected adaptive-moment gradient descent."""

    def __init__(self, n: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(it: int, total: int, lr0: float, lr_min: float) -> float:
    if total <= 1:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * it / (total - 1)))


@dataclass(frozen=True)
class OptimizerConfig:
    iterations: int = 300
    learning_rate: float = 0.05
    lr_final: float = 0.005
    weights: LossWeights = field(default_factory=LossWeights)
    raster: SoftRasterConfig = field(default_factory=SoftRasterConfig)
    early_stop_eps: float = 1e-6
    early_stop_patience: int = 30
    flip_restart: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class ObjectInput:
    mesh: TriMesh
    mask: BinaryMask
    target: PointCloud


@dataclass
class SceneInput:
    camera: Camera
    plane: Plane | None = None
    bg_bounds: Aabb | None = None


@dataclass
class FitResult:
    pose: PoseParams4 | PoseParams5
    mesh: TriMesh
    history: list[LossBreakdown]
    variant: ModelVariant
    wall_time: float
    best_history: list[float] = field(default_factory=list)
    min_plane_y: list[float] = field(default_factory=list)
    improved: bool = True
    status: str = "ok"

    @property
    def final_loss(self) -> LossBreakdown:
        i = int(np.argmin([h.total for h in self.history]))
        return self.history[i]


class PoseModel:
    """Binds a mesh (and plane) to one parameterization with a fixed pivot."""

    def __init__(self, mesh: TriMesh, variant: ModelVariant, plane: Plane | None = None):
        self.mesh = mesh
        self.variant = variant
        self.plane = plane
        if variant is ModelVariant.PLANAR4:
            if plane is None:
                raise MissingPlane("Planar4 requires a floor plane")
            F = plane.frame
            self.pivot = footprint_center((mesh.vertices - F.translation) @ F.rotation)
        else:
            self.pivot = compute_obb(mesh.vertices).center

    @property
    def k(self) -> int:
        return 4 if self.variant is ModelVariant.PLANAR4 else 5

    def theta(self, pose) -> np.ndarray:
        v = pose.vector()
        v[-1] = math.log(v[-1])
        return v

    def pose(self, theta: np.ndarray, template):
        v = np.array(theta, dtype=np.float64)
        v[-1] = math.exp(v[-1])
        if self.variant is ModelVariant.PLANAR4:
            return template.from_vector(v)
        return PoseParams5.from_vector(v)

    def apply(self, pose, with_tangents: bool = False):
        if self.variant is ModelVariant.PLANAR4:
            return apply_pose_planar(self.mesh, pose, self.plane, with_tangents, pivot=self.pivot)
        return apply_pose_regular(self.mesh, pose, with_tangents, pivot=self.pivot)

    def apply_theta(self, pose, with_tangents: bool = True):
        """Like :meth:`apply`, with the scale tangent taken w.r.t. log(s)."""
        out = self.apply(pose, with_tangents)
        if not with_tangents:
            return out
        moved, tan = out
        tan = tan.copy()
        tan[:, :, -1] *= pose.s
        return moved, tan


def evaluate_pose(model: PoseModel, pose, obj: ObjectInput, scene: SceneInput,
                  cfg: OptimizerConfig, with_gradient: bool = True) -> tuple[LossBreakdown, TriMesh]:
    """Composite loss (and gradient w.r.t. theta = [..., log s]) at ``pose``."""
    if with_gradient:
        moved, tan = model.apply_theta(pose, True)
    else:
        moved, tan = model.apply(pose), None
    w = cfg.weights
    if w.w_sil > 0:
        pred = render_soft_silhouette(moved, scene.camera, cfg.raster, tan)
    else:
        pred = ProbMap(np.zeros(obj.mask.shape), None if tan is None else np.zeros(obj.mask.shape + (model.k,)))
    lb = total_loss(pred, obj.mask, obj.target, moved, scene.bg_bounds, w, tan)
    return lb, moved


def _fit_once(model: PoseModel, start, obj: ObjectInput, scene: SceneInput,
              cfg: OptimizerConfig) -> FitResult:
    t0 = time.perf_counter()
    theta = model.theta(start)
    adam = Adam(len(theta))
    history: list[LossBreakdown] = []
    best_hist: list[float] = []
    min_y: list[float] = []
    best_loss, best_pose, best_mesh = math.inf, start, None
    last_improve_it, last_improve_val = 0, math.inf
    status = "ok"
    for it in range(cfg.iterations):
        pose = model.pose(theta, start)
        try:
            lb, moved = evaluate_pose(model, pose, obj, scene, cfg)
        except NumericalError:
            status = "non_finite"
            break
        if model.plane is not None:
            min_y.append(plane_local_min_y(moved.vertices, model.plane))
        if not (math.isfinite(lb.total) and np.all(np.isfinite(lb.gradient))):
            history.append(lb)
            status = "non_finite"
            logger.warning("non-finite loss at iteration %d; keeping best-so-far pose", it)
            break
        history.append(lb)
        if lb.total < best_loss:
            best_loss, best_pose, best_mesh = lb.total, pose, moved
        best_hist.append(best_loss)
        if last_improve_val - best_loss >= cfg.early_stop_eps:
            last_improve_it, last_improve_val = it, best_loss
        elif it - last_improve_it >= cfg.early_stop_patience:
            break
        lr = cosine_lr(it, cfg.iterations, cfg.learning_rate, cfg.lr_final)
        theta = adam.step(theta, lb.gradient, lr)
    if best_mesh is None:
        best_mesh = model.apply(best_pose)
    improved = bool(history) and best_loss <= history[0].total
    return FitResult(best_pose, best_mesh, history, model.variant, time.perf_counter() - t0,
                     best_hist, min_y, improved, status)


def _flipped(pose):
    if isinstance(pose, PoseParams4):
        return replace(pose, r_y=pose.r_y + math.pi)
    return replace(pose, r_y=pose.r_y + math.pi)


def fit_pose(obj: ObjectInput, scene: SceneInput, variant: ModelVariant,
             cfg: OptimizerConfig | None = None, start=None) -> FitResult:
    """Fit one object. Starts from ``start`` or the variant's initializer; with
    ``cfg.flip_restart`` also from the 180-degree-flipped yaw, keeping the
    run with the lower best loss."""
    cfg = cfg or OptimizerConfig()
    if variant is ModelVariant.PLANAR4 and scene.plane is None:
        raise MissingPlane("Planar4 requires a floor plane")
    model = PoseModel(obj.mesh, variant, scene.plane)
    if start is None:
        if variant is ModelVariant.PLANAR4:
            start = init_planar(obj.mesh, scene.plane, obj.target)
        else:
            start = init_regular(obj.mesh, obj.target)
    result = _fit_once(model, start, obj, scene, cfg)
    if cfg.flip_restart:
        other = _fit_once(model, _flipped(start), obj, scene, cfg)
        if other.best_history and (not result.best_history
                                   or other.best_history[-1] < result.best_history[-1]):
            other.wall_time += result.wall_time
            other.min_plane_y = result.min_plane_y + other.min_plane_y
            result = other
        else:
            result.wall_time += other.wall_time
            result.min_plane_y = result.min_plane_y + other.min_plane_y
    if result.status == "non_finite" and not result.history:
        raise NonFinite("loss was non-finite at the first iteration")
    return result

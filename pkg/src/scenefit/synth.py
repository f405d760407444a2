"""Synthetic test room: declarative fixture, ray casting and ground truth.

A fixture is a floor with three walls, a pinhole camera and a few objects,
each a union of axis-aligned boxes in its own canonical frame placed by a
yaw, a uniform scale and a position. Objects flagged ``on_floor`` have their
lowest point seated on y = 0. Everything here is deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import BinaryMask, Camera, OrganizedPointMap, RigidTransform, TriMesh, rot_y, unit_cube
from .raster import render_hard_silhouette

FLOOR_ID = 0
WALL_ID = 1
FIRST_OBJECT_ID = 2
LIGHT = np.array([0.3, 0.8, 0.5]) / np.linalg.norm([0.3, 0.8, 0.5])


def box(center, size) -> TriMesh:
    """Axis-aligned box with per-axis ``size``."""
    c = unit_cube()
    return c.with_vertices(c.vertices * np.asarray(size, dtype=np.float64) + np.asarray(center, dtype=np.float64))


@dataclass(frozen=True)
class FixtureObject:
    id: str
    label: str
    asset: TriMesh
    scale: float
    position: tuple[float, ...]
    yaw_deg: float
    on_floor: bool = True
    color: tuple[int, int, int] = (180, 180, 180)
    mask_kind: str = "silhouette"  # or "rect"

    def world_transform(self) -> tuple[np.ndarray, np.ndarray]:
        """(A, b) with world = A @ canonical + b; A = s * R_y(yaw)."""
        R = rot_y(math.radians(self.yaw_deg))
        A = self.scale * R
        if self.on_floor:
            x, z = self.position[0], self.position[-1]
            y = -self.scale * float(self.asset.vertices[:, 1].min())
            b = np.array([x, y, z])
        else:
            b = np.asarray(self.position, dtype=np.float64)
        return A, b

    def gt_mesh(self) -> TriMesh:
        A, b = self.world_transform()
        return self.asset.with_vertices(self.asset.vertices @ A.T + b)

    def gt_pose(self) -> dict:
        _, b = self.world_transform()
        return {"yaw": math.radians(self.yaw_deg), "scale": self.scale,
                "translation": b.tolist(), "on_floor": self.on_floor}


@dataclass(frozen=True)
class Fixture:
    camera: Camera
    objects: tuple[FixtureObject, ...]
    half_extent: float = 2.5
    wall_height: float = 2.6
    floor_color: tuple[int, int, int] = (168, 148, 118)
    wall_color: tuple[int, int, int] = (222, 216, 204)
    background_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValidationError("fixture object ids must be unique")

    def object(self, oid: str) -> FixtureObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def room_meshes(self) -> list[tuple[int, TriMesh]]:
        L, H = self.half_extent, self.wall_height
        quad = [[0, 1, 2], [0, 2, 3]]
        floor = TriMesh([[-L, 0, -L], [-L, 0, L], [L, 0, L], [L, 0, -L]], quad)
        back = TriMesh([[-L, 0, -L], [L, 0, -L], [L, H, -L], [-L, H, -L]], quad)
        left = TriMesh([[-L, 0, L], [-L, 0, -L], [-L, H, -L], [-L, H, L]], quad)
        right = TriMesh([[L, 0, -L], [L, 0, L], [L, H, L], [L, H, -L]], quad)
        return [(FLOOR_ID, floor), (WALL_ID, back), (WALL_ID, left), (WALL_ID, right)]

    def object_meshes(self) -> list[tuple[int, TriMesh]]:
        return [(FIRST_OBJECT_ID + i, o.gt_mesh()) for i, o in enumerate(self.objects)]

    def colors(self) -> dict[int, tuple[int, int, int]]:
        out = {FLOOR_ID: self.floor_color, WALL_ID: self.wall_color}
        for i, o in enumerate(self.objects):
            out[FIRST_OBJECT_ID + i] = o.color
        return out


def _object_from_dict(d: dict) -> FixtureObject:
    if "boxes" in d:
        asset = TriMesh.merge([box(b["center"], b["size"]) for b in d["boxes"]])
    else:
        asset = unit_cube()
    return FixtureObject(
        id=d["id"], label=d.get("label", d["id"]), asset=asset, scale=float(d.get("scale", 1.0)),
        position=tuple(float(x) for x in d["position"]), yaw_deg=float(d.get("yaw_deg", 0.0)),
        on_floor=bool(d.get("on_floor", True)), color=tuple(d.get("color", (180, 180, 180))),
        mask_kind=d.get("mask", "silhouette"),
    )


def fixture_from_dict(d: dict) -> Fixture:
    cam = d["camera"]
    camera = Camera.look_at(cam["eye"], cam["target"], width=int(cam["width"]),
                            height=int(cam["height"]), fov_x_deg=float(cam.get("fov_x_deg", 60.0)))
    room = d.get("room", {})
    return Fixture(
        camera=camera,
        objects=tuple(_object_from_dict(o) for o in d.get("objects", [])),
        half_extent=float(room.get("half_extent", 2.5)),
        wall_height=float(room.get("wall_height", 2.6)),
        floor_color=tuple(room.get("floor_color", (168, 148, 118))),
        wall_color=tuple(room.get("wall_color", (222, 216, 204))),
        background_offset=tuple(float(x) for x in d.get("background_offset", (0, 0, 0))),
    )


def load_fixture(path=None) -> Fixture:
    """Load a fixture JSON; the bundled room when ``path`` is None."""
    if path is None:
        text = resources.files("scenefit.data").joinpath("fixture_room.json").read_text()
    else:
        text = Path(path).read_text()
    return fixture_from_dict(json.loads(text))


@dataclass(frozen=True)
class RayHits:
    depth: np.ndarray  # (H, W) camera z, inf on miss
    ids: np.ndarray  # (H, W) surface id, -1 on miss
    points: np.ndarray  # (H, W, 3) world points, nan on miss
    normals: np.ndarray  # (H, W, 3) unit normals facing the camera


def raycast(surfaces: list[tuple[int, TriMesh]], camera: Camera) -> RayHits:
    """Nearest hit per pixel-center ray (Moller-Trumbore, two-sided)."""
    H, W = camera.height, camera.width
    px = camera.pixel_grid().reshape(-1, 2)
    dirs_cam = np.stack([(px[:, 0] - camera.cx) / camera.fx, (px[:, 1] - camera.cy) / camera.fy,
                         np.ones(len(px))], axis=1)
    R, o = camera.pose.rotation, camera.pose.translation
    dirs = dirs_cam @ R.T
    best_t = np.full(len(px), np.inf)
    best_id = np.full(len(px), -1, dtype=np.int64)
    best_n = np.zeros((len(px), 3))
    for sid, mesh in surfaces:
        for a, b, c in mesh.triangles:
            e1, e2 = b - a, c - a
            pvec = np.cross(dirs, e2)
            det = pvec @ e1
            ok = np.abs(det) > 1e-14
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            tvec = o - a
            u = (pvec @ tvec) * inv
            q = np.cross(tvec, e1)
            v = (dirs @ q) * inv
            t = (q @ e2) * inv
            hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9) & (t < best_t)
            if hit.any():
                n = np.cross(e1, e2)
                n = n / np.linalg.norm(n)
                best_t[hit] = t[hit]
                best_id[hit] = sid
                best_n[hit] = n
    # t multiplies a direction with unit camera z, so t is the camera depth
    pts = o + dirs * np.where(np.isfinite(best_t), best_t, np.nan)[:, None]
    facing = np.sign(np.einsum("ij,ij->i", best_n, -dirs))
    best_n *= np.where(facing == 0, 1.0, facing)[:, None]
    return RayHits(best_t.reshape(H, W), best_id.reshape(H, W), pts.reshape(H, W, 3),
                   best_n.reshape(H, W, 3))


def shade(hits: RayHits, colors: dict[int, tuple[int, int, int]]) -> np.ndarray:
    """Flat Lambert shading with ambient term; misses are black."""
    H, W = hits.ids.shape
    base = np.zeros((H, W, 3))
    for sid, col in colors.items():
        base[hits.ids == sid] = col
    lam = np.clip(np.einsum("hwc,c->hw", hits.normals, LIGHT), 0.0, 1.0)
    img = base * (0.45 + 0.55 * lam)[..., None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def pointmap_from_hits(hits: RayHits, offset=(0.0, 0.0, 0.0)) -> OrganizedPointMap:
    valid = hits.ids >= 0
    pts = hits.points + np.asarray(offset, dtype=np.float64)
    return OrganizedPointMap(pts, valid.astype(np.float64), valid)


@dataclass(frozen=True)
class RenderedScene:
    image: np.ndarray
    background: np.ndarray
    pointmap: OrganizedPointMap
    background_pointmap: OrganizedPointMap
    ids: np.ndarray


def render_fixture(fx: Fixture) -> RenderedScene:
    room = fx.room_meshes()
    full = raycast(room + fx.object_meshes(), fx.camera)
    empty = raycast(room, fx.camera)
    colors = fx.colors()
    return RenderedScene(
        image=shade(full, colors),
        background=shade(empty, colors),
        pointmap=pointmap_from_hits(full),
        background_pointmap=pointmap_from_hits(empty, fx.background_offset),
        ids=full.ids,
    )


def visible_mask(ids: np.ndarray, sid: int) -> BinaryMask:
    return BinaryMask(ids == sid)


def rect_mask(mask: BinaryMask) -> BinaryMask:
    """Tight bounding rectangle of a mask."""
    bits = mask.bits
    out = np.zeros_like(bits)
    if bits.any():
        r = np.nonzero(bits.any(axis=1))[0]
        c = np.nonzero(bits.any(axis=0))[0]
        out[r[0]:r[-1] + 1, c[0]:c[-1] + 1] = True
    return BinaryMask(out)


def gt_masks(fx: Fixture) -> dict[str, BinaryMask]:
    """Per-object hard-rasterized silhouettes, ignoring occlusion."""
    return {o.id: render_hard_silhouette(o.gt_mesh(), fx.camera) for o in fx.objects}


def camera_to_dict(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "rotation": cam.pose.rotation.tolist(), "translation": cam.pose.translation.tolist()}


def camera_from_dict(d: dict) -> Camera:
    pose = RigidTransform(np.asarray(d.get("rotation", np.eye(3))), np.asarray(d.get("translation", np.zeros(3))))
    return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                  int(d["width"]), int(d["height"]), pose)

"""End-to-end orchestration with a content-addressed stage cache.

Work directory layout::

    masks/      <id>.png per object, floor.png
    aq/         <id>_query.png, <id>_response.png, <id>_object.png, background.png
    assets/     <id>.obj from the asset generator
    geometry/   scene.pmap, background.pmap, camera.json, bg_align.json
    poses/      plane.json, <id>.json, <id>.obj (posed mesh), <id>_loss.csv
    cache/      one record per stage: input key plus output file hashes
    scene.json  the scene result
    report.json metrics, when ground truth is configured

A stage is skipped when its record's key matches the hash of its current
inputs and every recorded output file is present with the recorded hash.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .aq import AqLayout, PromptKind, build_aq_query, build_plain_query, load_prompts, parse_aq_response
from .config import ObjectResult, SceneConfig, SceneResult, validate_result
from .errors import EmptyInput, SceneFitError, ValidationError
from .geometry import Aabb, BinaryMask, Camera, OrganizedPointMap, TriMesh
from .metrics import evaluate_scene
from .pose import (
    FitResult,
    ModelVariant,
    ObjectInput,
    OptimizerConfig,
    PoseParams4,
    SceneInput,
    fit_pose,
    select_model,
)
from .scene import IcpConfig, Plane, RansacConfig, background_bounds, icp_align, ransac_plane, stencil_pointmap
from .services import FLOOR_LABEL, ServiceSuite
from .synth import camera_from_dict, camera_to_dict

logger = logging.getLogger(__name__)

SUBDIRS = ("masks", "aq", "assets", "geometry", "poses", "cache")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


class StageCache:
    def __init__(self, workdir):
        self.root = Path(workdir)
        self.dir = self.root / "cache"
        self.hits: list[str] = []
        self.runs: list[str] = []

    @staticmethod
    def key(*parts) -> str:
        return sha256_bytes(json.dumps(parts, sort_keys=True, default=str).encode())

    def get(self, name: str, key: str) -> dict | None:
        rec_path = self.dir / f"{name}.json"
        if not rec_path.exists():
            return None
        try:
            rec = io.read_json(rec_path)
        except (OSError, json.JSONDecodeError):
            return None
        if rec.get("key") != key:
            return None
        for rel, digest in rec["outputs"].items():
            p = self.root / rel
            if not p.exists() or sha256_file(p) != digest:
                return None
        self.hits.append(name)
        return rec["meta"]

    def put(self, name: str, key: str, outputs, meta: dict) -> dict:
        rec = {"key": key, "meta": meta,
               "outputs": {str(Path(p).relative_to(self.root)): sha256_file(p) for p in outputs}}
        io.write_json(self.dir / f"{name}.json", rec)
        self.runs.append(name)
        return meta


def _slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", label.lower()).strip("_") or "object"


def camera_from_pointmap(pm: OrganizedPointMap) -> Camera:
    """Least-squares pinhole intrinsics for a point map in camera coordinates."""
    H, W = pm.height, pm.width
    v, u = np.nonzero(pm.valid)
    p = pm.points[v, u]
    ok = p[:, 2] > 1e-9
    if ok.sum() < 3:
        raise EmptyInput("point map has too few valid points to infer a camera")
    p, u, v = p[ok], u[ok], v[ok]
    fx, cx = np.linalg.lstsq(np.stack([p[:, 0] / p[:, 2], np.ones(len(p))], 1), u, rcond=None)[0]
    fy, cy = np.linalg.lstsq(np.stack([p[:, 1] / p[:, 2], np.ones(len(p))], 1), v, rcond=None)[0]
    return Camera(float(fx), float(fy), float(np.clip(cx, 0, W - 1)), float(np.clip(cy, 0, H - 1)), W, H)


def plane_to_json(plane: Plane | None) -> dict | None:
    return None if plane is None else {"normal": plane.n.tolist(), "point": plane.p0.tolist()}


def plane_from_json(d: dict | None) -> Plane | None:
    return None if d is None else Plane(np.asarray(d["normal"]), np.asarray(d["point"]))


def bounds_to_json(b: Aabb | None) -> dict | None:
    return None if b is None else {"min": b.min.tolist(), "max": b.max.tolist()}


def bounds_from_json(d: dict | None) -> Aabb | None:
    return None if d is None else Aabb(np.asarray(d["min"]), np.asarray(d["max"]))


def pose_to_json(pose) -> dict:
    if isinstance(pose, PoseParams4):
        return {"t_x": pose.t_x, "t_z": pose.t_z, "r_y": pose.r_y, "s": pose.s,
                "ground_offset": pose.ground_offset}
    return {"t": list(pose.t), "r_y": pose.r_y, "s": pose.s}


def write_loss_csv(path, result: FitResult) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "silhouette", "geometric", "bbox", "total", "best_total"])
    for i, (h, best) in enumerate(zip(result.history, result.best_history)):
        w.writerow([i, repr(h.silhouette), repr(h.geometric), repr(h.bbox), repr(h.total), repr(best)])
    io.write_bytes(path, buf.getvalue().encode())


# ---------------------------------------------------------------- fitting


@dataclass
class FitJob:
    id: str
    mesh: TriMesh
    mask: BinaryMask
    variant: str = "auto"


@dataclass
class SceneContext:
    camera: Camera
    pointmap: OrganizedPointMap
    floor: BinaryMask | None
    plane: Plane | None
    bounds: Aabb | None


def choose_variant(job: FitJob, ctx: SceneContext, dilation_px: int, disable_planar: bool) -> ModelVariant:
    if job.variant != "auto":
        v = ModelVariant(job.variant)
    elif ctx.floor is None or ctx.plane is None:
        v = ModelVariant.REGULAR5
    else:
        v = select_model(job.mask, ctx.floor, dilation_px)
    if disable_planar or ctx.plane is None:
        v = ModelVariant.REGULAR5
    return v


def fit_job(job: FitJob, ctx: SceneContext, cfg: OptimizerConfig, poses_dir: Path,
            dilation_px: int = 2, disable_planar: bool = False, min_confidence: float = 0.0) -> dict:
    """Fit one object and write poses/<id>.{json,obj} plus the loss CSV.

    Returns the pose record (also the content of poses/<id>.json).
    """
    rec = {"id": job.id, "status": "ok", "variant": None, "pose": None, "mesh": None, "loss": None,
           "iterations": 0, "error": None, "min_plane_y": None, "improved": None}
    try:
        target = stencil_pointmap(ctx.pointmap, job.mask, min_confidence)
        if len(target) == 0:
            rec.update(status="empty_target", error="mask selects no valid points")
        else:
            variant = choose_variant(job, ctx, dilation_px, disable_planar)
            scene = SceneInput(ctx.camera, ctx.plane, ctx.bounds)
            res = fit_pose(ObjectInput(job.mesh, job.mask, target), scene, variant, cfg)
            best = res.final_loss
            mesh_rel = f"poses/{job.id}.obj"
            io.save_obj(poses_dir / f"{job.id}.obj", res.mesh)
            write_loss_csv(poses_dir / f"{job.id}_loss.csv", res)
            rec.update(variant=variant.value, pose=pose_to_json(res.pose), mesh=mesh_rel,
                       loss={"silhouette": best.silhouette, "geometric": best.geometric,
                             "bbox": best.bbox, "total": best.total},
                       iterations=len(res.history), improved=res.improved,
                       min_plane_y=[min(res.min_plane_y), max(res.min_plane_y)] if res.min_plane_y else None)
            if res.status != "ok":
                rec["error"] = f"optimizer stopped early: {res.status}"
    except SceneFitError as e:
        logger.warning("object %s failed: %s", job.id, e)
        rec.update(status="failed", error=f"{type(e).__name__}: {e}")
    io.write_json(poses_dir / f"{job.id}.json", rec)
    return rec


def object_result(rec: dict) -> ObjectResult:
    return ObjectResult(rec["id"], rec["status"], rec["variant"], rec["pose"], rec["mesh"],
                        rec["loss"], rec["iterations"], rec["error"])


def fit_plane(ctx_pointmap: OrganizedPointMap, floor: BinaryMask | None, cfg: RansacConfig,
              camera: Camera, min_confidence: float = 0.0) -> Plane | None:
    if floor is None or floor.count() == 0:
        return None
    pts = stencil_pointmap(ctx_pointmap, floor, min_confidence)
    try:
        return ransac_plane(pts, cfg, camera_up=camera.up_vector())
    except SceneFitError as e:
        logger.warning("floor plane fit failed (%s); all objects fall back to Regular5", e)
        return None


def _run_parallel(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _evaluate(work: Path, records: list[dict], gt_dir: Path | None, cfg: SceneConfig) -> dict | None:
    if gt_dir is None:
        return None
    preds = [io.load_obj(work / r["mesh"]) for r in sorted(records, key=lambda r: r["id"])
             if r["status"] == "ok"]
    gts = [io.load_obj(p) for p in sorted(Path(gt_dir).glob("*.obj"))]
    if not preds or not gts:
        logger.warning("skipping evaluation: no predicted or ground-truth meshes")
        return None
    report = evaluate_scene(preds, gts, cfg.metric_config()).to_json()
    io.write_json(work / "report.json", report)
    return report


def _finish(work: Path, records: list[dict], camera: Camera | None, plane: Plane | None,
            bounds: Aabb | None, metrics: dict | None) -> SceneResult:
    objs = [object_result(r) for r in records]
    result = SceneResult(objs, camera_to_dict(camera) if camera else None, plane_to_json(plane),
                         bounds_to_json(bounds), metrics, SceneResult.overall_status(objs))
    doc = result.to_json()
    validate_result(doc)
    io.write_json(work / "scene.json", doc)
    return result


# ---------------------------------------------------------------- fit command


def run_fit(cfg: SceneConfig) -> SceneResult:
    """Stencil, plane, init and optimize for precomputed masks/assets/point map."""
    if cfg.pointmap is None:
        raise ValidationError("fit needs a point map")
    for o in cfg.objects:
        if o.asset is None:
            raise ValidationError(f"fit needs an asset mesh for object {o.id!r}")
    # load everything before touching the output directory
    pm = io.load_pmap(cfg.pointmap)
    camera = camera_from_dict(cfg.camera) if cfg.camera else camera_from_pointmap(pm)
    floor = io.load_mask(cfg.floor_mask) if cfg.floor_mask else None
    jobs = [FitJob(o.id, io.load_obj(o.asset), io.load_mask(o.mask), o.variant) for o in cfg.objects]
    bounds = None
    if cfg.background_pointmap:
        bg = io.load_pmap(cfg.background_pointmap)
        bounds = background_bounds(bg.points[bg.valid])
    opt = cfg.optimizer_config()
    plane = fit_plane(pm, floor, cfg.ransac_config(), camera, cfg.min_confidence)

    work = cfg.output_dir
    (work / "poses").mkdir(parents=True, exist_ok=True)
    ctx = SceneContext(camera, pm, floor, plane, bounds)
    records = _run_parallel(
        lambda j: fit_job(j, ctx, opt, work / "poses", cfg.dilation_px, cfg.disable_planar,
                          cfg.min_confidence), jobs, cfg.threads)
    metrics = _evaluate(work, records, cfg.gt_dir, cfg)
    return _finish(work, records, camera, plane, bounds, metrics)


# ---------------------------------------------------------------- full pipeline


@dataclass
class PipelineRun:
    result: SceneResult
    workdir: Path
    cache_hits: list[str] = field(default_factory=list)
    stages_run: list[str] = field(default_factory=list)


def run_pipeline(cfg: SceneConfig, services: ServiceSuite, layout: AqLayout | None = None) -> PipelineRun:
    if cfg.image is None:
        raise ValidationError("pipeline needs an input image")
    layout = layout or AqLayout()
    prompts = load_prompts(cfg.prompts)
    work = cfg.output_dir
    for d in SUBDIRS:
        (work / d).mkdir(parents=True, exist_ok=True)
    cache = StageCache(work)
    image = io.load_rgb(cfg.image)
    img_h = sha256_file(cfg.image)
    seed = cfg.seed
    labels = services.labels or prompts[PromptKind.SEGMENTATION_LABELS].text.splitlines()

    # segmentation
    key = cache.key("segment", img_h, labels)
    meta = cache.get("segment", key)
    if meta is None:
        segs = services.segmenter.segment(image, labels)
        objects, outputs, floor_bits = [], [], None
        used: set[str] = set()
        for i, s in enumerate(segs):
            if s.label == FLOOR_LABEL:
                floor_bits = s.mask.bits if floor_bits is None else (floor_bits | s.mask.bits)
                continue
            if s.mask.count() == 0:
                continue
            oid = s.instance_id or f"{_slug(s.label)}_{i}"
            while oid in used:
                oid += "_"
            used.add(oid)
            p = work / "masks" / f"{oid}.png"
            io.save_mask(p, s.mask)
            objects.append({"id": oid, "label": s.label})
            outputs.append(p)
        if floor_bits is not None:
            io.save_mask(work / "masks" / "floor.png", BinaryMask(floor_bits))
            outputs.append(work / "masks" / "floor.png")
        meta = cache.put("segment", key, outputs, {"objects": objects, "floor": floor_bits is not None})
    objects = sorted(meta["objects"], key=lambda o: o["id"])
    if not objects:
        logger.warning("segmenter returned no object masks; emitting an empty scene")
        result = _finish(work, [], None, None, None, None)
        return PipelineRun(result, work, cache.hits, cache.runs)
    floor = io.load_mask(work / "masks" / "floor.png") if meta["floor"] else None

    # empty-room image
    bg_prompt = prompts[PromptKind.BACKGROUND_REMOVAL]
    key = cache.key("background", img_h, bg_prompt.text, seed)
    bg_path = work / "aq" / "background.png"
    if cache.get("background", key) is None:
        io.save_rgb(bg_path, services.image_editor.edit(image, bg_prompt, seed))
        cache.put("background", key, [bg_path], {})
    bg_h = sha256_file(bg_path)

    # geometry
    geo = work / "geometry"
    key = cache.key("geometry", img_h, bg_h)
    if cache.get("geometry", key) is None:
        (pm, cam), (bg_pm, _) = services.geometry_estimator.estimate([image, io.load_rgb(bg_path)])[:2]
        io.save_pmap(geo / "scene.pmap", pm)
        io.save_pmap(geo / "background.pmap", bg_pm)
        io.write_json(geo / "camera.json", camera_to_dict(cam))  # keep only the main camera
        cache.put("geometry", key, [geo / "scene.pmap", geo / "background.pmap", geo / "camera.json"], {})
    pm = io.load_pmap(geo / "scene.pmap")
    bg_pm = io.load_pmap(geo / "background.pmap")
    camera = camera_from_dict(io.read_json(geo / "camera.json"))
    pm_h = sha256_file(geo / "scene.pmap")

    # background alignment and bounds
    key = cache.key("align", pm_h, sha256_file(geo / "background.pmap"))
    meta = cache.get("align", key)
    if meta is None:
        T, rms = icp_align(bg_pm.points[bg_pm.valid], pm.points[pm.valid], IcpConfig(translation_only=True))
        moved = T.apply(bg_pm.points[bg_pm.valid])
        meta = cache.put("align", key, [], {"translation": T.translation.tolist(), "rms": rms,
                                            "bounds": bounds_to_json(background_bounds(moved))})
        io.write_json(geo / "bg_align.json", meta)
    bounds = bounds_from_json(meta["bounds"])

    # per-object A-Q and asset generation
    obj_prompt = prompts[PromptKind.OBJECT_EXTRACTION]

    def assets_for(o) -> dict:
        oid = o["id"]
        mask_path = work / "masks" / f"{oid}.png"
        mask = io.load_mask(mask_path)
        key = cache.key("aq", img_h, sha256_file(mask_path), obj_prompt.text, asdict(layout), seed,
                        cfg.disable_aq, cfg.aq_cleanup, cfg.aq_max_attempts)
        meta = cache.get(f"aq_{oid}", key)
        paths = [work / "aq" / f"{oid}_{k}.png" for k in ("query", "response", "object")]
        if meta is None:
            if cfg.disable_aq:
                query = build_plain_query(image, mask)
                response = services.image_editor.edit(query, obj_prompt, seed)
                obj_img, frac, empty, attempts = response, None, False, 1
            else:
                query = build_aq_query(image, mask, layout)
                for attempts in range(1, cfg.aq_max_attempts + 1):
                    response = services.image_editor.edit(query, obj_prompt, seed + attempts - 1)
                    parsed = parse_aq_response(response, layout, cleanup=cfg.aq_cleanup)
                    if not parsed.empty:
                        break
                    logger.info("A-Q response for %s is %.1f%% white (attempt %d)",
                                oid, 100 * parsed.white_fraction, attempts)
                obj_img, frac, empty = parsed.image, parsed.white_fraction, parsed.empty
            for p, im in zip(paths, (query, response, obj_img)):
                io.save_rgb(p, im)
            meta = cache.put(f"aq_{oid}", key, paths,
                             {"attempts": attempts, "white_fraction": frac, "empty": empty})
        if meta["empty"]:
            return {"id": oid, "status": "aq_empty",
                    "error": f"completion stayed blank after {meta['attempts']} attempts"}
        key = cache.key("asset", sha256_file(paths[2]), oid, seed)
        asset_path = work / "assets" / f"{oid}.obj"
        if cache.get(f"asset_{oid}", key) is None:
            mesh = services.asset_generator.generate(io.load_rgb(paths[2]), oid, seed)
            io.save_obj(asset_path, mesh)
            cache.put(f"asset_{oid}", key, [asset_path], {})
        return {"id": oid, "status": "ok"}

    def guarded(fn):
        def run(o):
            try:
                return fn(o)
            except SceneFitError as e:
                logger.warning("object %s failed: %s", o["id"], e)
                return {"id": o["id"], "status": "failed", "error": f"{type(e).__name__}: {e}"}
        return run

    staged = _run_parallel(guarded(assets_for), objects, cfg.threads)

    # floor plane
    floor_h = sha256_file(work / "masks" / "floor.png") if floor is not None else None
    key = cache.key("plane", pm_h, floor_h, asdict(cfg.ransac_config()))
    meta = cache.get("plane", key)
    if meta is None:
        plane = fit_plane(pm, floor, cfg.ransac_config(), camera, cfg.min_confidence)
        meta = cache.put("plane", key, [], {"plane": plane_to_json(plane)})
        io.write_json(work / "poses" / "plane.json", meta)
    plane_json = meta["plane"]
    plane = plane_from_json(plane_json)

    # pose fitting
    opt = cfg.optimizer_config()
    ctx = SceneContext(camera, pm, floor, plane, bounds)

    def pose_for(s) -> dict:
        oid = s["id"]
        if s["status"] != "ok":
            rec = {"id": oid, "status": s["status"], "variant": None, "pose": None, "mesh": None,
                   "loss": None, "iterations": 0, "error": s.get("error")}
            return rec
        asset_path = work / "assets" / f"{oid}.obj"
        mask_path = work / "masks" / f"{oid}.png"
        key = cache.key("pose", sha256_file(asset_path), sha256_file(mask_path), pm_h, floor_h,
                        plane_json, bounds_to_json(bounds), asdict(opt), cfg.dilation_px,
                        cfg.disable_planar, cfg.min_confidence)
        out = [work / "poses" / f"{oid}.json"]
        rec = cache.get(f"pose_{oid}", key)
        if rec is None:
            job = FitJob(oid, io.load_obj(asset_path), io.load_mask(mask_path))
            rec = fit_job(job, ctx, opt, work / "poses", cfg.dilation_px, cfg.disable_planar,
                          cfg.min_confidence)
            if rec["status"] == "ok":
                out += [work / "poses" / f"{oid}.obj", work / "poses" / f"{oid}_loss.csv"]
            cache.put(f"pose_{oid}", key, out, rec)
        return rec

    records = _run_parallel(guarded(pose_for), staged, cfg.threads)
    records = [r if "variant" in r else {**r, "variant": None, "pose": None, "mesh": None,
                                         "loss": None, "iterations": 0} for r in records]
    metrics = _evaluate(work, records, cfg.gt_dir, cfg)
    result = _finish(work, records, camera, plane, bounds, metrics)
    return PipelineRun(result, work, cache.hits, cache.runs)

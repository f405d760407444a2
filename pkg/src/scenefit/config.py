"""Scene configuration (input) and scene result (output) documents."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .errors import ValidationError
from .losses import LossWeights
from .metrics import MetricConfig
from .pose import OptimizerConfig
from .raster import SoftRasterConfig
from .scene import IcpConfig, RansacConfig

RESULT_VERSION = 1


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, d: dict | None, **nested):
    """Instantiate a config dataclass from a dict, rejecting unknown keys."""
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for key, sub in nested.items():
        if key in d:
            d[key] = sub(d[key])
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"invalid {cls.__name__}: {e}") from None


def optimizer_config(d: dict | None, seed: int | None = None) -> OptimizerConfig:
    d = dict(d or {})
    if seed is not None:
        d["seed"] = seed
    return _build(OptimizerConfig, d,
                  weights=lambda w: _build(LossWeights, w),
                  raster=lambda r: _build(SoftRasterConfig, r))


def metric_config(d: dict | None, seed: int | None = None) -> MetricConfig:
    d = dict(d or {})
    if seed is not None:
        d["seed"] = seed
    return _build(MetricConfig, d, icp=lambda c: _build(IcpConfig, c))


def ransac_config(d: dict | None, seed: int | None = None) -> RansacConfig:
    d = dict(d or {})
    if seed is not None:
        d["seed"] = seed
    return _build(RansacConfig, d)


@dataclass(frozen=True)
class ObjectEntry:
    id: str
    mask: Path
    asset: Path | None = None
    variant: str = "auto"  # auto | planar4 | regular5


@dataclass(frozen=True)
class SceneConfig:
    output_dir: Path
    image: Path | None = None
    objects: tuple[ObjectEntry, ...] = ()
    floor_mask: Path | None = None
    pointmap: Path | None = None
    background_pointmap: Path | None = None
    camera: dict | None = None
    optimizer: dict = field(default_factory=dict)
    metric: dict = field(default_factory=dict)
    ransac: dict = field(default_factory=dict)
    services: dict = field(default_factory=dict)
    prompts: dict = field(default_factory=dict)
    gt_dir: Path | None = None
    seed: int = 0
    threads: int = 1
    dilation_px: int = 2
    min_confidence: float = 0.0
    disable_planar: bool = False
    disable_aq: bool = False
    aq_cleanup: bool = False
    aq_max_attempts: int = 3

    def optimizer_config(self) -> OptimizerConfig:
        return optimizer_config(self.optimizer, self.seed)

    def metric_config(self) -> MetricConfig:
        return metric_config(self.metric, self.seed)

    def ransac_config(self) -> RansacConfig:
        return ransac_config(self.ransac, self.seed)


_PATH_KEYS = ("image", "floor_mask", "pointmap", "background_pointmap", "gt_dir")


def scene_config_from_dict(d: dict, base_dir=".", require: tuple[str, ...] = ()) -> SceneConfig:
    """Parse and validate; relative paths resolve against ``base_dir``.

    Every referenced path must exist; ``require`` names keys that must be set.
    """
    base = Path(base_dir)
    d = dict(d)
    known = {f.name for f in fields(SceneConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown scene config keys: {sorted(unknown)}")
    for key in require:
        if not d.get(key):
            raise ValidationError(f"scene config is missing {key!r}")

    def path(p, what):
        q = Path(p)
        q = q if q.is_absolute() else base / q
        if not q.exists():
            raise ValidationError(f"{what} not found: {q}")
        return q

    for key in _PATH_KEYS:
        if d.get(key) is not None:
            d[key] = path(d[key], key)
    objects, seen = [], set()
    for o in d.get("objects", []):
        if "id" not in o or "mask" not in o:
            raise ValidationError("object entries need 'id' and 'mask'")
        if o["id"] in seen:
            raise ValidationError(f"duplicate object id {o['id']!r}")
        seen.add(o["id"])
        variant = o.get("variant", "auto")
        if variant not in ("auto", "planar4", "regular5"):
            raise ValidationError(f"unknown variant {variant!r} for object {o['id']!r}")
        objects.append(ObjectEntry(
            o["id"], path(o["mask"], f"mask of {o['id']}"),
            path(o["asset"], f"asset of {o['id']}") if o.get("asset") else None, variant))
    d["objects"] = tuple(objects)
    services = dict(d.get("services") or {})
    if services.get("fixture"):
        services["fixture"] = str(path(services["fixture"], "service fixture"))
    d["services"] = services
    out = d.get("output_dir", "out")
    d["output_dir"] = Path(out) if Path(out).is_absolute() else base / out
    if int(d.get("threads", 1)) < 1:
        raise ValidationError("threads must be >= 1")
    try:
        cfg = SceneConfig(**d)
    except TypeError as e:
        raise ValidationError(f"invalid scene config: {e}") from None
    # fail early on malformed nested blocks
    cfg.optimizer_config()
    cfg.metric_config()
    cfg.ransac_config()
    return cfg


def load_scene_config(path, overrides: dict | None = None, require: tuple[str, ...] = ()) -> SceneConfig:
    p = Path(path)
    try:
        d = json.loads(p.read_text())
    except FileNotFoundError:
        raise ValidationError(f"scene config not found: {p}") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"scene config is not valid JSON: {e}") from None
    return scene_config_from_dict(deep_merge(d, overrides or {}), p.parent, require)


# ---------------------------------------------------------------- results


OBJECT_STATUSES = ("ok", "failed", "empty_target", "aq_empty")
SCENE_STATUSES = ("ok", "partial", "explicit_empty", "failed")


@dataclass
class ObjectResult:
    id: str
    status: str
    variant: str | None = None
    pose: dict | None = None
    mesh: str | None = None
    loss: dict | None = None
    iterations: int = 0
    error: str | None = None

    def to_json(self) -> dict:
        return {"id": self.id, "status": self.status, "variant": self.variant, "pose": self.pose,
                "mesh": self.mesh, "loss": self.loss, "iterations": self.iterations,
                "error": self.error}


@dataclass
class SceneResult:
    objects: list[ObjectResult]
    camera: dict | None = None
    plane: dict | None = None
    background_bounds: dict | None = None
    metrics: dict | None = None
    status: str = "ok"

    def to_json(self) -> dict:
        return {
            "version": RESULT_VERSION,
            "status": self.status,
            "camera": self.camera,
            "plane": self.plane,
            "background_bounds": self.background_bounds,
            "objects": [o.to_json() for o in sorted(self.objects, key=lambda o: o.id)],
            "metrics": self.metrics,
        }

    @staticmethod
    def overall_status(objects: list[ObjectResult]) -> str:
        if not objects:
            return "explicit_empty"
        ok = sum(o.status == "ok" for o in objects)
        return "ok" if ok == len(objects) else ("partial" if ok else "failed")


def result_schema() -> dict:
    return json.loads(resources.files("scenefit.data").joinpath("scene_result.schema.json").read_text())


def validate_result(doc: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(doc, result_schema())
    except jsonschema.ValidationError as e:
        raise ValidationError(f"scene result violates schema: {e.message}") from None

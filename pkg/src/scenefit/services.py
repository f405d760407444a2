"""The four external model services: interfaces, deterministic mocks, HTTP clients.

Every service is an abstract endpoint. Mocks replay a synthetic fixture and
count their calls; HTTP clients speak a uniform JSON protocol with base64
images. Real network calls happen only when ``SCENEFIT_ALLOW_REMOTE=1`` or an
explicit transport is injected.
"""

from __future__ import annotations

import base64
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .aq import PromptKind, PromptTemplate
from .errors import SceneFitError, ValidationError
from .geometry import BinaryMask, Camera, OrganizedPointMap, TriMesh, unit_cube
from .io import decode_pmap, decode_png, encode_pmap, encode_png

logger = logging.getLogger(__name__)

REMOTE_ENV_FLAG = "SCENEFIT_ALLOW_REMOTE"
FLOOR_LABEL = "floor"


class ServiceError(SceneFitError):
    """A service call failed after all retries."""


@dataclass(frozen=True)
class Segment:
    label: str
    mask: BinaryMask
    instance_id: str | None = None


class _Counted:
    def __init__(self):
        self._lock = threading.Lock()
        self.calls: Counter = Counter()

    def _count(self, name: str) -> None:
        with self._lock:
            self.calls[name] += 1

    @property
    def total_calls(self) -> int:
        with self._lock:
            return sum(self.calls.values())


class Segmenter(_Counted, ABC):
    @abstractmethod
    def segment(self, image: np.ndarray, labels: list[str]) -> list[Segment]: ...


class ImageEditor(_Counted, ABC):
    @abstractmethod
    def edit(self, image: np.ndarray, prompt: PromptTemplate, seed: int = 0) -> np.ndarray: ...


class AssetGenerator(_Counted, ABC):
    @abstractmethod
    def generate(self, image: np.ndarray, object_id: str, seed: int = 0) -> TriMesh: ...


class GeometryEstimator(_Counted, ABC):
    @abstractmethod
    def estimate(self, images: list[np.ndarray]) -> list[tuple[OrganizedPointMap, Camera]]: ...


# ---------------------------------------------------------------- mocks


class MockSegmenter(Segmenter):
    """Returns a fixed list of segments, filtered to the requested labels."""

    def __init__(self, segments: list[Segment]):
        super().__init__()
        self.segments = list(segments)

    def segment(self, image, labels):
        self._count("segment")
        wanted = set(labels)
        return [s for s in self.segments if s.label in wanted]


class MockImageEditor(ImageEditor):
    """Identity completion, or a fixture image keyed by prompt kind.

    ``blank_responses`` makes the first n object-extraction calls return an
    all-white canvas, which exercises the retry path.
    """

    def __init__(self, fixtures: dict | None = None, blank_responses: int = 0):
        super().__init__()
        self.fixtures = {PromptKind(k): v for k, v in (fixtures or {}).items()}
        self.blank_responses = blank_responses

    def edit(self, image, prompt, seed=0):
        self._count("edit")
        if prompt.kind in self.fixtures:
            return np.array(self.fixtures[prompt.kind], dtype=np.uint8)
        if prompt.kind is PromptKind.OBJECT_EXTRACTION:
            with self._lock:
                blank = self.blank_responses > 0
                self.blank_responses -= int(blank)
            if blank:
                return np.full_like(image, 255)
        return np.array(image, dtype=np.uint8)


class MockAssetGenerator(AssetGenerator):
    """Fixture mesh per object id, unit cube otherwise."""

    def __init__(self, meshes: dict[str, TriMesh] | None = None):
        super().__init__()
        self.meshes = dict(meshes or {})

    def generate(self, image, object_id, seed=0):
        self._count("generate")
        return self.meshes.get(object_id, unit_cube())


class MockGeometryEstimator(GeometryEstimator):
    """Returns precomputed point maps (one per input image, cycling)."""

    def __init__(self, outputs: list[tuple[OrganizedPointMap, Camera]]):
        super().__init__()
        if not outputs:
            raise ValidationError("mock geometry estimator needs at least one output")
        self.outputs = list(outputs)

    def estimate(self, images):
        self._count("estimate")
        return [self.outputs[i % len(self.outputs)] for i in range(len(images))]


@dataclass
class ServiceSuite:
    segmenter: Segmenter
    image_editor: ImageEditor
    asset_generator: AssetGenerator
    geometry_estimator: GeometryEstimator
    labels: list[str] = field(default_factory=list)

    def endpoints(self):
        return (self.segmenter, self.image_editor, self.asset_generator, self.geometry_estimator)

    @property
    def total_calls(self) -> int:
        return sum(s.total_calls for s in self.endpoints())


def mock_suite_from_fixture(fixture, rendered=None, blank_responses: int = 0) -> ServiceSuite:
    """All-mock suite replaying a synthetic fixture (see :mod:`scenefit.synth`)."""
    from . import synth

    rs = rendered or synth.render_fixture(fixture)
    segments = []
    for i, o in enumerate(fixture.objects):
        mask = synth.visible_mask(rs.ids, synth.FIRST_OBJECT_ID + i)
        if o.mask_kind == "rect":
            mask = synth.rect_mask(mask)
        segments.append(Segment(o.label, mask, o.id))
    floor = synth.visible_mask(rs.ids, synth.FLOOR_ID)
    if floor.count():
        segments.append(Segment(FLOOR_LABEL, floor, FLOOR_LABEL))
    cam = fixture.camera
    labels = sorted({o.label for o in fixture.objects} | {FLOOR_LABEL})
    return ServiceSuite(
        MockSegmenter(segments),
        MockImageEditor({PromptKind.BACKGROUND_REMOVAL: rs.background}, blank_responses),
        MockAssetGenerator({o.id: o.asset for o in fixture.objects}),
        MockGeometryEstimator([(rs.pointmap, cam), (rs.background_pointmap, cam)]),
        labels,
    )


# ---------------------------------------------------------------- HTTP


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    auth_env: str | None = None
    timeout_s: float = 120.0
    retries: int = 2

    def __post_init__(self):
        if self.retries < 0 or not self.timeout_s > 0:
            raise ValidationError("retries must be >= 0 and timeout positive")


class HttpEndpoint:
    """POST JSON with bearer auth and bounded retries on transport/5xx errors."""

    def __init__(self, cfg: EndpointConfig, transport=None):
        import httpx

        if transport is None and os.environ.get(REMOTE_ENV_FLAG) != "1":
            raise ValidationError(f"remote services are disabled; set {REMOTE_ENV_FLAG}=1 to enable")
        headers = {}
        if cfg.auth_env:
            token = os.environ.get(cfg.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        self.cfg = cfg
        self._httpx = httpx
        # no backoff sleeps against an injected (in-process) transport
        self._backoff = transport is None
        self.client = httpx.Client(base_url=cfg.base_url, timeout=cfg.timeout_s,
                                   headers=headers, transport=transport)

    def post(self, path: str, payload: dict) -> dict:
        httpx = self._httpx
        last = None
        for attempt in range(self.cfg.retries + 1):
            try:
                r = self.client.post(path, json=payload)
                if r.status_code >= 500:
                    last = ServiceError(f"{path}: HTTP {r.status_code}")
                elif r.status_code >= 400:
                    raise ServiceError(f"{path}: HTTP {r.status_code}: {r.text[:200]}")
                else:
                    return r.json()
            except httpx.TransportError as e:
                last = ServiceError(f"{path}: {e}")
            logger.warning("attempt %d for %s failed: %s", attempt + 1, path, last)
            if attempt < self.cfg.retries:
                if self._backoff:
                    time.sleep(min(0.5 * 2 ** attempt, 8.0))
        raise last


class HttpSegmenter(Segmenter):
    def __init__(self, endpoint: HttpEndpoint):
        super().__init__()
        self.endpoint = endpoint

    def segment(self, image, labels):
        self._count("segment")
        out = self.endpoint.post("/segment", {"image": _b64(encode_png(image)), "labels": list(labels)})
        segs = []
        for s in out["segments"]:
            bits = decode_png(_unb64(s["mask"])).any(axis=2)
            segs.append(Segment(s["label"], BinaryMask(bits), s.get("id")))
        return segs


class HttpImageEditor(ImageEditor):
    def __init__(self, endpoint: HttpEndpoint):
        super().__init__()
        self.endpoint = endpoint

    def edit(self, image, prompt, seed=0):
        self._count("edit")
        out = self.endpoint.post("/edit", {"image": _b64(encode_png(image)), "prompt": prompt.text,
                                           "kind": prompt.kind.value, "seed": int(seed)})
        return decode_png(_unb64(out["image"]))


class HttpAssetGenerator(AssetGenerator):
    def __init__(self, endpoint: HttpEndpoint):
        super().__init__()
        self.endpoint = endpoint

    def generate(self, image, object_id, seed=0):
        self._count("generate")
        out = self.endpoint.post("/generate", {"image": _b64(encode_png(image)),
                                               "object_id": object_id, "seed": int(seed)})
        mesh = out["mesh"]
        return TriMesh(np.asarray(mesh["vertices"], dtype=np.float64),
                       np.asarray(mesh["faces"], dtype=np.int64)).cleaned()


class HttpGeometryEstimator(GeometryEstimator):
    def __init__(self, endpoint: HttpEndpoint):
        super().__init__()
        self.endpoint = endpoint

    def estimate(self, images):
        from .synth import camera_from_dict

        self._count("estimate")
        out = self.endpoint.post("/estimate", {"images": [_b64(encode_png(im)) for im in images]})
        return [(decode_pmap(_unb64(r["pmap"])), camera_from_dict(r["camera"])) for r in out["results"]]


def encode_estimate_result(pm: OrganizedPointMap, cam: Camera) -> dict:
    """Server-side helper for the /estimate response shape."""
    from .synth import camera_to_dict

    return {"pmap": _b64(encode_pmap(pm)), "camera": camera_to_dict(cam)}


_HTTP = {
    "segmenter": HttpSegmenter,
    "image_editor": HttpImageEditor,
    "asset_generator": HttpAssetGenerator,
    "geometry_estimator": HttpGeometryEstimator,
}


def build_suite(cfg: dict | None, fixture=None, transports: dict | None = None) -> ServiceSuite:
    """Resolve every endpoint to exactly one backend.

    ``cfg`` maps service name to ``{"backend": "mock"}`` or ``{"backend":
    "http", "base_url": ..., "auth_env": ..., "timeout_s": ..., "retries": ...}``.
    Mock endpoints replay ``fixture`` (the bundled room when None).
    """
    from . import synth

    cfg = dict(cfg or {})
    transports = transports or {}
    need_mock = any(cfg.get(name, {}).get("backend", "mock") == "mock" for name in _HTTP)
    mock = mock_suite_from_fixture(fixture or synth.load_fixture()) if need_mock else None
    chosen = {}
    for name, cls in _HTTP.items():
        entry = dict(cfg.get(name, {}))
        backend = entry.pop("backend", "mock")
        if backend == "mock":
            chosen[name] = getattr(mock, name)
        elif backend == "http":
            try:
                ep = EndpointConfig(**entry)
            except TypeError as e:
                raise ValidationError(f"bad endpoint config for {name}: {e}") from None
            chosen[name] = cls(HttpEndpoint(ep, transports.get(name)))
        else:
            raise ValidationError(f"unknown backend {backend!r} for {name}")
    labels = cfg.get("labels") or (mock.labels if mock else [])
    return ServiceSuite(labels=list(labels), **chosen)

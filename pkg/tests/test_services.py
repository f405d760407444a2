import json

import httpx
import numpy as np
import pytest

from scenefit import synth
from scenefit.aq import DEFAULT_PROMPTS, AqLayout, PromptKind, build_aq_query, parse_aq_response
from scenefit.bvh import TriangleBVH
from scenefit.errors import ValidationError
from scenefit.geometry import BinaryMask, unit_cube
from scenefit.io import decode_png, encode_png
from scenefit.scene import stencil_pointmap
from scenefit.services import (REMOTE_ENV_FLAG, EndpointConfig, HttpEndpoint, HttpGeometryEstimator,
                               HttpImageEditor, HttpSegmenter, MockAssetGenerator, MockImageEditor,
                               ServiceError, build_suite, encode_estimate_result, mock_suite_from_fixture,
                               _b64, _unb64)

CUBE_FIXTURE = {
    "camera": {"eye": [0.0, 1.6, 2.6], "target": [0.0, 0.3, 0.0], "width": 96, "height": 72},
    "objects": [{"id": "cube", "label": "furniture", "scale": 0.6, "position": [0.0, 0.0], "yaw_deg": 20}],
}


def test_geometry_estimator_stencil_hits_cube_surface():
    fx = synth.fixture_from_dict(CUBE_FIXTURE)
    suite = mock_suite_from_fixture(fx)
    img = np.zeros((72, 96, 3), np.uint8)
    pm, cam = suite.geometry_estimator.estimate([img])[0]
    seg = [s for s in suite.segmenter.segment(img, ["furniture"]) if s.instance_id == "cube"][0]
    cloud = stencil_pointmap(pm, seg.mask)
    mesh = fx.objects[0].gt_mesh()
    d2, _, _ = TriangleBVH(mesh.vertices, mesh.faces).nearest(cloud.points)
    assert len(cloud) > 100 and np.mean(np.sqrt(d2) <= 1e-6) >= 0.95


def test_identity_editor_preserves_round_trip():
    img = np.random.default_rng(0).integers(0, 256, (30, 40, 3), dtype=np.uint8)
    m = np.zeros((30, 40), bool)
    m[5:20, 8:30] = True
    q = build_aq_query(img, BinaryMask(m))
    resp = MockImageEditor().edit(q, DEFAULT_PROMPTS[PromptKind.OBJECT_EXTRACTION])
    assert np.array_equal(parse_aq_response(resp).image, q[AqLayout().panel_task.slices()])


def test_blank_responses_then_identity():
    ed = MockImageEditor(blank_responses=2)
    img = np.zeros((4, 4, 3), np.uint8)
    prompt = DEFAULT_PROMPTS[PromptKind.OBJECT_EXTRACTION]
    outs = [ed.edit(img, prompt) for _ in range(3)]
    assert (outs[0] == 255).all() and (outs[1] == 255).all() and (outs[2] == 0).all()
    assert ed.total_calls == 3


def test_asset_generator_default_unit_cube():
    m = MockAssetGenerator().generate(np.zeros((2, 2, 3), np.uint8), "anything")
    assert len(m.faces) == 12 and np.allclose(m.vertices, unit_cube().vertices)


def test_mock_suite_segments_and_counts():
    fx = synth.load_fixture()
    suite = mock_suite_from_fixture(fx)
    segs = suite.segmenter.segment(np.zeros((1, 1, 3), np.uint8), suite.labels)
    assert {s.instance_id for s in segs} == {"cabinet", "table", "shelf", "floor"}
    assert suite.total_calls == 1


def test_remote_gate(monkeypatch):
    monkeypatch.delenv(REMOTE_ENV_FLAG, raising=False)
    with pytest.raises(ValidationError):
        HttpEndpoint(EndpointConfig("http://example.invalid"))
    with pytest.raises(ValidationError):
        build_suite({"segmenter": {"backend": "http", "base_url": "http://example.invalid"}})
    monkeypatch.setenv(REMOTE_ENV_FLAG, "1")
    HttpEndpoint(EndpointConfig("http://example.invalid"))  # constructing opens no connection


def test_build_suite_rejects_unknown_backend():
    with pytest.raises(ValidationError):
        build_suite({"segmenter": {"backend": "grpc"}})


def endpoint(handler, **kw):
    return HttpEndpoint(EndpointConfig("http://svc", **kw), transport=httpx.MockTransport(handler))


def test_http_segmenter_round_trip(monkeypatch):
    monkeypatch.setenv("SEG_TOKEN", "s3cret")
    mask = np.zeros((5, 6, 3), np.uint8)
    mask[1:3, 2:5] = 255
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        body = json.loads(request.content)
        seen["labels"] = body["labels"]
        assert decode_png(_unb64(body["image"])).shape == (5, 6, 3)
        return httpx.Response(200, json={"segments": [{"label": "chair", "mask": _b64(encode_png(mask)), "id": "c1"}]})

    seg = HttpSegmenter(endpoint(handler, auth_env="SEG_TOKEN"))
    out = seg.segment(np.zeros((5, 6, 3), np.uint8), ["chair"])
    assert seen == {"auth": "Bearer s3cret", "labels": ["chair"]}
    assert out[0].label == "chair" and out[0].instance_id == "c1" and out[0].mask.count() == 6


def test_http_retries_server_errors():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json={"image": _b64(encode_png(np.full((2, 2, 3), 9, np.uint8)))})

    ed = HttpImageEditor(endpoint(handler, retries=2))
    out = ed.edit(np.zeros((2, 2, 3), np.uint8), DEFAULT_PROMPTS[PromptKind.BACKGROUND_REMOVAL])
    assert len(calls) == 3 and (out == 9).all()


def test_http_gives_up_after_retries():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("refused")

    ed = HttpImageEditor(endpoint(handler, retries=1))
    with pytest.raises(ServiceError):
        ed.edit(np.zeros((2, 2, 3), np.uint8), DEFAULT_PROMPTS[PromptKind.BACKGROUND_REMOVAL])
    assert len(calls) == 2


def test_http_client_errors_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(422, text="bad image")

    ed = HttpImageEditor(endpoint(handler, retries=3))
    with pytest.raises(ServiceError, match="422"):
        ed.edit(np.zeros((2, 2, 3), np.uint8), DEFAULT_PROMPTS[PromptKind.BACKGROUND_REMOVAL])
    assert len(calls) == 1


def test_http_geometry_round_trip():
    fx = synth.fixture_from_dict(CUBE_FIXTURE)
    rs = synth.render_fixture(fx)

    def handler(request):
        n = len(json.loads(request.content)["images"])
        return httpx.Response(200, json={"results": [encode_estimate_result(rs.pointmap, fx.camera)] * n})

    est = HttpGeometryEstimator(endpoint(handler))
    (pm, cam), = est.estimate([rs.image])
    assert np.array_equal(pm.valid, rs.pointmap.valid)
    assert np.allclose(pm.points[pm.valid], rs.pointmap.points[pm.valid], atol=1e-6)
    assert np.allclose(cam.pose.matrix(), fx.camera.pose.matrix()) and cam.fx == fx.camera.fx


def test_build_suite_mixes_backends():
    def handler(request):
        return httpx.Response(200, json={"segments": []})

    suite = build_suite({"segmenter": {"backend": "http", "base_url": "http://svc"}},
                        transports={"segmenter": httpx.MockTransport(handler)})
    assert isinstance(suite.segmenter, HttpSegmenter)
    assert suite.segmenter.segment(np.zeros((2, 2, 3), np.uint8), ["x"]) == []
    assert isinstance(suite.image_editor, MockImageEditor)

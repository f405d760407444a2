"""End-to-end pipeline runs over the bundled synthetic room with mock services."""

import hashlib
import json
import shutil

import numpy as np
import pytest

from scenefit import io
from scenefit.cli import main
from scenefit.config import load_scene_config, validate_result
from scenefit.pipeline import run_pipeline
from scenefit.services import MockSegmenter, ServiceError, mock_suite_from_fixture
from scenefit.synth import load_fixture

FAST = {"optimizer": {"iterations": 40}}


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "gen", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="session")
def fixture():
    return load_fixture()


def config(synth_dir, out, **extra):
    return load_scene_config(synth_dir / "pipeline.json", {**FAST, "output_dir": str(out), **extra},
                             require=("image",))


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="session")
def first_run(synth_dir, fixture, tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    suite = mock_suite_from_fixture(fixture)
    return run_pipeline(config(synth_dir, out), suite), suite


def test_synth_gen_layout(synth_dir):
    for name in ("image.png", "background.png", "scene.pmap", "background.pmap", "camera.json",
                 "fixture.json", "gt_poses.json", "scene.json", "pipeline.json", "masks/floor.png"):
        assert (synth_dir / name).is_file(), name
    ids = sorted(p.stem for p in (synth_dir / "gt").glob("*.obj"))
    assert ids == ["cabinet", "shelf", "table"]
    assert sorted(p.stem for p in (synth_dir / "assets").glob("*.obj")) == ids


def test_pipeline_output_layout(first_run):
    run, suite = first_run
    work = run.workdir
    for d in ("masks", "aq", "assets", "geometry", "poses", "cache"):
        assert (work / d).is_dir()
    doc = io.read_json(work / "scene.json")
    validate_result(doc)
    assert run.result.status == "ok"
    assert sorted(o["id"] for o in doc["objects"]) == ["cabinet", "shelf", "table"]
    for o in doc["objects"]:
        assert o["status"] == "ok"
        assert (work / o["mesh"]).is_file()
        assert (work / "poses" / f"{o['id']}_loss.csv").is_file()
        assert (work / "aq" / f"{o['id']}_query.png").is_file()
    assert (work / "report.json").is_file()
    assert suite.total_calls > 0


def test_variant_selection_and_ground_contact(first_run):
    run, _ = first_run
    variants = {o.id: o.variant for o in run.result.objects}
    assert variants == {"cabinet": "planar4", "table": "planar4", "shelf": "regular5"}
    for oid in ("cabinet", "table"):
        rec = io.read_json(run.workdir / "poses" / f"{oid}.json")
        lo, hi = rec["min_plane_y"]
        assert -1e-6 <= lo <= hi <= 1e-6


def test_cached_rerun_makes_no_service_calls(first_run, synth_dir, fixture):
    run, _ = first_run
    before = digest(run.workdir / "scene.json")
    suite = mock_suite_from_fixture(fixture)
    again = run_pipeline(config(synth_dir, run.workdir), suite)
    assert suite.total_calls == 0
    assert again.stages_run == []
    assert digest(run.workdir / "scene.json") == before


def test_fresh_workdirs_are_byte_identical(first_run, synth_dir, fixture, tmp_path):
    run, _ = first_run
    other = run_pipeline(config(synth_dir, tmp_path / "b"), mock_suite_from_fixture(fixture))
    assert digest(other.workdir / "scene.json") == digest(run.workdir / "scene.json")
    for oid in ("cabinet", "shelf", "table"):
        assert digest(other.workdir / "poses" / f"{oid}.obj") == digest(run.workdir / "poses" / f"{oid}.obj")


def test_changed_optimizer_settings_rerun_only_pose_stages(first_run, synth_dir, fixture, tmp_path):
    work = tmp_path / "w"
    shutil.copytree(first_run[0].workdir, work)
    suite = mock_suite_from_fixture(fixture)
    again = run_pipeline(config(synth_dir, work, optimizer={"iterations": 41}), suite)
    assert suite.total_calls == 0
    assert sorted(again.stages_run) == ["pose_cabinet", "pose_shelf", "pose_table"]


def test_empty_segmentation_gives_explicit_empty(synth_dir, fixture, tmp_path):
    suite = mock_suite_from_fixture(fixture)
    suite.segmenter = MockSegmenter([])
    run = run_pipeline(config(synth_dir, tmp_path), suite)
    assert run.result.status == "explicit_empty"
    doc = io.read_json(tmp_path / "scene.json")
    validate_result(doc)
    assert doc["objects"] == [] and doc["status"] == "explicit_empty"


def test_blank_completion_is_retried(synth_dir, fixture, tmp_path):
    suite = mock_suite_from_fixture(fixture, blank_responses=2)
    run = run_pipeline(config(synth_dir, tmp_path, threads=1), suite)
    assert run.result.status == "ok"
    meta = io.read_json(tmp_path / "cache" / "aq_cabinet.json")["meta"]
    assert meta["attempts"] == 3 and not meta["empty"]


def test_blank_completion_gives_up_after_max_attempts(synth_dir, fixture, tmp_path):
    suite = mock_suite_from_fixture(fixture, blank_responses=3)
    run = run_pipeline(config(synth_dir, tmp_path, threads=1), suite)
    status = {o.id: o.status for o in run.result.objects}
    assert status == {"cabinet": "aq_empty", "shelf": "ok", "table": "ok"}
    assert run.result.status == "partial"
    assert suite.asset_generator.calls.get("generate", 0) == 2


def test_failure_in_one_object_is_isolated(synth_dir, fixture, tmp_path):
    suite = mock_suite_from_fixture(fixture)
    original = suite.asset_generator.generate

    def flaky(image, object_id, seed=0):
        if object_id == "table":
            raise ServiceError("asset service unavailable")
        return original(image, object_id, seed)

    suite.asset_generator.generate = flaky
    run = run_pipeline(config(synth_dir, tmp_path), suite)
    status = {o.id: o.status for o in run.result.objects}
    assert status == {"cabinet": "ok", "shelf": "ok", "table": "failed"}
    assert run.result.status == "partial"
    table = next(o for o in run.result.objects if o.id == "table")
    assert "asset service unavailable" in table.error
    validate_result(io.read_json(tmp_path / "scene.json"))


def test_disable_planar_ablation(synth_dir, fixture, tmp_path):
    run = run_pipeline(config(synth_dir, tmp_path, disable_planar=True), mock_suite_from_fixture(fixture))
    assert {o.variant for o in run.result.objects} == {"regular5"}


def test_disable_aq_ablation(synth_dir, fixture, tmp_path):
    suite = mock_suite_from_fixture(fixture)
    run = run_pipeline(config(synth_dir, tmp_path, disable_aq=True), suite)
    assert run.result.status == "ok"
    image = io.load_rgb(synth_dir / "image.png")
    mask = io.load_mask(tmp_path / "masks" / "cabinet.png").bits
    query = io.load_rgb(tmp_path / "aq" / "cabinet_query.png")
    # the plain query is the masked object over white at input resolution
    assert query.shape == image.shape
    assert np.array_equal(query[mask], image[mask])
    assert (query[~mask] == 255).all()
    assert suite.image_editor.calls["edit"] == 1 + 3


def test_pipeline_cli(synth_dir, tmp_path):
    cfg = tmp_path / "fast.json"
    cfg.write_text(json.dumps(FAST))
    out = tmp_path / "cli_out"
    code = main(["--config", str(cfg), "pipeline", "run", str(synth_dir / "pipeline.json"), "--out", str(out)])
    assert code == 0
    validate_result(io.read_json(out / "scene.json"))

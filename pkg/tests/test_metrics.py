import itertools
import math

import numpy as np
import pytest

from scenefit.errors import DegenerateCloud, EmptyInput, ValidationError
from scenefit.geometry import RigidTransform, rot_axis, unit_cube
from scenefit.metrics import (MetricConfig, MetricReport, bbox_iou3d, chamfer, evaluate_scene, fscore,
                              hausdorff, normalization_of, normalize_cloud)
from scenefit.synth import box

import oracles

CORNERS = np.array(list(itertools.product([0, 1], repeat=3)), dtype=float)
SCENE = [box((0, 0.4, 0), (1.0, 0.8, 0.5)), box((1.5, 0.2, 0.6), (0.6, 0.4, 0.6)),
         box((-1.2, 1.0, -0.8), (0.5, 0.2, 0.3))]


def test_normalization_of_cube_corners():
    n = normalization_of(CORNERS)
    assert np.allclose(n.center, 0.5) and abs(n.scale - 1 / math.sqrt(3)) < 1e-15


def test_normalization_idempotent_and_definitional(rng):
    for _ in range(5):
        p = rng.normal(size=(200, 3)) * rng.uniform(0.1, 5, 3) + rng.normal(size=3)
        out, _ = normalize_cloud(p)
        assert np.abs(out.points.mean(0)).max() <= 1e-9
        lo, hi = out.points.min(0), out.points.max(0)
        assert abs(np.linalg.norm(hi - lo) - 1) <= 1e-9
        again = normalization_of(out.points)
        assert np.abs(again.center).max() <= 1e-9 and abs(again.scale - 1) <= 1e-9


def test_normalization_degenerate():
    with pytest.raises(DegenerateCloud):
        normalization_of(np.ones((4, 3)))
    with pytest.raises(EmptyInput):
        normalization_of(np.zeros((0, 3)))


def test_chamfer_examples(rng):
    a = rng.normal(size=(50, 3))
    assert chamfer(a, a) == 0
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 1
    a, b = rng.normal(size=(300, 3)), rng.normal(size=(400, 3))
    assert abs(chamfer(a, b) - oracles.chamfer(a, b)) < 1e-9


def test_fscore_examples(rng):
    a = rng.normal(size=(50, 3))
    assert fscore(a, a, 0.01) == (1.0, 1.0, 1.0)
    f, p, r = fscore([[0, 0, 0], [1, 0, 0]], [[0, 0, 0]], 0.5)
    assert (p, r) == (0.5, 1.0) and abs(f - 2 / 3) < 1e-15
    a, b = rng.normal(size=(300, 3)), rng.normal(size=(250, 3))
    got, want = fscore(a, b, 0.3), oracles.fscore(a, b, 0.3)
    assert np.abs(np.subtract(got, want)).max() < 1e-12


def test_fscore_separate_recall_tau():
    f, p, r = fscore([[0, 0, 0]], [[0.4, 0, 0]], 0.5, recall_tau=0.1)
    assert p == 1 and r == 0


def test_bbox_iou_examples(rng):
    assert bbox_iou3d(CORNERS, CORNERS) == 1
    assert abs(bbox_iou3d(CORNERS, CORNERS + [0.5, 0, 0]) - 1 / 3) < 1e-15
    assert bbox_iou3d(CORNERS, CORNERS + [3, 0, 0]) == 0
    a, b = rng.normal(size=(100, 3)), rng.normal(size=(120, 3)) + 0.3
    assert abs(bbox_iou3d(a, b) - oracles.bbox_iou(a, b)) < 1e-12


def test_hausdorff_examples(rng):
    a = rng.normal(size=(50, 3))
    assert hausdorff(a, a) == 0
    assert hausdorff([[0, 0, 0], [1, 0, 0]], [[0, 0, 0]]) == 1
    a, b = rng.normal(size=(300, 3)), rng.normal(size=(200, 3))
    assert abs(hausdorff(a, b) - oracles.hausdorff(a, b)) < 1e-9


def test_chamfer_bounded_by_hausdorff(rng):
    for _ in range(10):
        a, b = rng.normal(size=(80, 3)), rng.normal(size=(90, 3)) * 2
        assert chamfer(a, b) <= hausdorff(a, b)


def test_metric_config_validation():
    with pytest.raises(ValidationError):
        MetricConfig(samples_per_scene=10)
    with pytest.raises(ValidationError):
        MetricConfig(fscore_tau=0)


def test_report_json_round_trip():
    r = MetricReport(0.1, 0.8, 0.7, 0.9, 0.5, 0.4, 0.01, 10, 12)
    assert MetricReport.from_json(r.to_json()) == r


def test_evaluate_identity_scene():
    r = evaluate_scene(SCENE, SCENE)
    assert r.chamfer <= 1e-6 and r.fscore >= 0.999 and r.bbox_iou >= 0.999 and r.hausdorff <= 1e-3


def test_evaluate_absorbs_rigid_offset():
    T = RigidTransform(rot_axis([0.3, 1.0, 0.2], math.radians(10)), (0.05, -0.02, 0.04))
    moved = [m.transformed(T) for m in SCENE]
    r = evaluate_scene(moved, SCENE)
    assert r.chamfer <= 5e-4


def test_evaluate_missing_object_regression():
    r = evaluate_scene(SCENE[:2], SCENE, MetricConfig(align=False))
    assert r.recall < 1 and r.precision > 0.99 and r.hausdorff > 0.1


def test_evaluate_without_alignment_is_plain_metric():
    r = evaluate_scene(SCENE, [unit_cube()], MetricConfig(align=False, samples_per_scene=500))
    assert r.icp_rms == 0.0 and r.n_pred == r.n_gt == 500


def test_joint_normalization_is_swap_symmetric():
    pred = [m.transformed(RigidTransform(rot_axis([0, 1, 0], 0.1), (0.03, 0, 0.01))) for m in SCENE[:2]]
    cfg = MetricConfig(normalization="joint", samples_per_scene=2000)
    a, b = evaluate_scene(pred, SCENE, cfg), evaluate_scene(SCENE, pred, cfg)
    assert abs(a.chamfer - b.chamfer) < 1e-12 and abs(a.hausdorff - b.hausdorff) < 1e-12
    assert a.precision == b.recall and a.recall == b.precision


def test_every_normalization_mode_scores_identical_scenes_zero():
    for mode in ("gt", "independent", "joint"):
        assert evaluate_scene(SCENE, SCENE, MetricConfig(normalization=mode, samples_per_scene=500)).chamfer < 1e-9
    with pytest.raises(ValidationError):
        MetricConfig(normalization="median")

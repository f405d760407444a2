import math

import numpy as np
import pytest

from scenefit.errors import EmptyInput, MissingPlane, ShapeMismatch
from scenefit.geometry import BinaryMask, PointCloud, TriMesh, unit_cube
from scenefit.losses import LossWeights
from scenefit.pose import (Adam, ModelVariant, ObjectInput, OptimizerConfig, PoseModel, PoseParams4,
                           PoseParams5, SceneInput, apply_pose_planar, apply_pose_regular,
                           cosine_lr, evaluate_pose, fit_pose, init_planar, init_regular,
                           plane_local_min_y, select_model)
from scenefit.raster import SoftRasterConfig
from scenefit.scene import Plane
from scenefit.synth import box

from oracles import central_difference
from scenes import FLOOR, cube_scene

TILTED = Plane([0, math.cos(math.radians(10)), math.sin(math.radians(10))], [0.2, -0.1, 0.3])
ASYM = box((0.2, 0.3, -0.1), (1.0, 0.5, 0.3))


def test_pose_params_validation():
    with pytest.raises(ValueError):
        PoseParams5(s=0.0)
    with pytest.raises(ValueError):
        PoseParams4(t_x=math.nan)


def test_regular_identity_bit_exact():
    m = unit_cube((0.3, 0.1, -0.2))
    assert np.array_equal(apply_pose_regular(m, PoseParams5()).vertices, m.vertices)


def test_regular_scale_and_rotation_about_origin():
    m = TriMesh(np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1]]), np.array([[0, 1, 2]]))
    out = apply_pose_regular(m, PoseParams5(s=2.0), pivot=np.zeros(3)).vertices
    assert np.allclose(out[0], [2, 0, 0])
    out = apply_pose_regular(m, PoseParams5(r_y=math.pi / 2), pivot=np.zeros(3)).vertices
    assert np.allclose(out[0], [0, 0, -1], atol=1e-15)


def test_planar_identity():
    m = unit_cube((0.3, 0.5, -0.2))
    assert np.abs(apply_pose_planar(m, PoseParams4(), FLOOR).vertices - m.vertices).max() <= 1e-12


def test_planar_translation_on_floor():
    m = unit_cube((0.3, 0.5, -0.2))
    out = apply_pose_planar(m, PoseParams4(t_x=1.0, t_z=2.0), FLOOR).vertices
    assert np.array_equal(out, m.vertices + [1.0, 0.0, 2.0])


@pytest.mark.parametrize("plane", [FLOOR, TILTED])
@pytest.mark.parametrize("s", [0.5, 2.0])
@pytest.mark.parametrize("r", [0.0, 1.0])
def test_planar_preserves_min_local_y(plane, s, r):
    before = plane_local_min_y(ASYM.vertices, plane)
    out = apply_pose_planar(ASYM, PoseParams4(0.4, -0.7, r, s), plane).vertices
    assert abs(plane_local_min_y(out, plane) - before) <= 1e-9


@pytest.mark.parametrize("variant", list(ModelVariant))
def test_apply_tangents_match_finite_differences(variant):
    model = PoseModel(ASYM, variant, TILTED)
    pose = PoseParams4(0.1, -0.2, 0.4, 1.3, 0.05) if variant is ModelVariant.PLANAR4 else \
        PoseParams5((0.1, 0.2, -0.3), 0.4, 1.3)
    _, tan = model.apply(pose, with_tangents=True)
    for j in range(model.k):
        def f(x, j=j):
            v = pose.vector()
            v[j] = x[0]
            return model.apply(pose.from_vector(v) if variant is ModelVariant.PLANAR4
                               else PoseParams5.from_vector(v)).vertices
        h = 1e-6
        num = (f([pose.vector()[j] + h]) - f([pose.vector()[j] - h])) / (2 * h)
        assert np.abs(num - tan[:, :, j]).max() < 1e-7


def test_select_model_rules():
    a = np.zeros((10, 10), bool)
    a[2:5, 2:5] = True
    b = np.zeros((10, 10), bool)
    b[4:8, 4:8] = True
    assert select_model(BinaryMask(a), BinaryMask(b)) is ModelVariant.PLANAR4
    c = np.zeros((10, 10), bool)
    c[7:9, 2:5] = True  # rows 5 and 6 separate it from a: two pixels apart
    assert select_model(BinaryMask(a), BinaryMask(c), dilation_px=0) is ModelVariant.REGULAR5
    assert select_model(BinaryMask(a), BinaryMask(c), dilation_px=3) is ModelVariant.PLANAR4
    with pytest.raises(ShapeMismatch):
        select_model(BinaryMask(a), BinaryMask(np.zeros((3, 3), bool)))


@pytest.fixture(scope="module")
def asym_samples():
    pts, _ = ASYM.sample_surface(20000, np.random.default_rng(0))
    return pts


def test_init_regular_self(asym_samples):
    p = init_regular(ASYM, asym_samples)
    assert abs(p.s - 1) < 0.05 and np.abs(p.t).max() < 1e-3 and abs(p.r_y) < 0.01


def test_init_regular_scaled(asym_samples):
    assert abs(init_regular(ASYM, asym_samples * 2).s / 2 - 1) < 0.05


def test_init_regular_shifted(asym_samples):
    p = init_regular(ASYM, asym_samples + [1, 0, 0])
    assert np.abs(np.array(p.t) - [1, 0, 0]).max() < 1e-3


def test_init_regular_empty():
    with pytest.raises(EmptyInput):
        init_regular(ASYM, np.zeros((0, 3)))


def test_init_planar_seats_lifted_cube():
    cube = unit_cube((0, 0.8, 0))  # bottom at y = 0.3
    p = init_planar(cube, FLOOR, cube.vertices)
    assert abs(plane_local_min_y(apply_pose_planar(cube, p, FLOOR).vertices, FLOOR)) <= 1e-9


def test_init_planar_footprint_on_target_centroid():
    cube = unit_cube((0, 0.5, 0))
    target = cube.vertices + [2.0, 0.0, 3.0]
    out = apply_pose_planar(cube, init_planar(cube, FLOOR, target), FLOOR).vertices
    bottom = out[out[:, 1] < 1e-9]
    assert np.abs(bottom[:, [0, 2]].mean(axis=0) - [2, 3]).max() <= 1e-6


def test_init_planar_tilted_plane():
    p = init_planar(ASYM, TILTED, ASYM.vertices)
    out = apply_pose_planar(ASYM, p, TILTED).vertices
    assert abs(TILTED.signed_distance(out).min()) <= 1e-9


def test_adam_and_cosine():
    a = Adam(2)
    th = np.array([1.0, -1.0])
    for _ in range(500):
        th = a.step(th, 2 * th, 0.05)
    assert np.abs(th).max() < 1e-2
    assert cosine_lr(0, 10, 0.1, 0.01) == 0.1 and abs(cosine_lr(9, 10, 0.1, 0.01) - 0.01) < 1e-15


def test_planar_fit_requires_plane():
    cs = cube_scene(0, n_target=200)
    with pytest.raises(MissingPlane):
        fit_pose(cs.obj, SceneInput(cs.camera), ModelVariant.PLANAR4)


def test_fit_fixed_point_at_ground_truth():
    cs = cube_scene(0, n_target=1000)
    cfg = OptimizerConfig(iterations=60, raster=SoftRasterConfig(sigma=1e-8))
    res = fit_pose(cs.obj, cs.scene, ModelVariant.PLANAR4, cfg, start=PoseParams4())
    assert res.history[0].total < 1e-3
    p = res.pose
    assert max(abs(p.t_x), abs(p.t_z), abs(p.s - 1), abs(math.remainder(p.r_y, math.pi / 2))) < 1e-3


def test_regular_ablation_reduces_loss():
    cs = cube_scene(1, n_target=1000)
    start = PoseParams5((0.2, 0.15, 0.1), math.radians(10), 1.15)
    cfg = OptimizerConfig(iterations=80, weights=LossWeights(w_bbox=0), flip_restart=False)
    res = fit_pose(cs.obj, cs.scene, ModelVariant.REGULAR5, cfg, start=start)
    assert res.final_loss.total <= 0.7 * res.history[0].total


def test_evaluate_pose_gradient_matches_finite_differences():
    cs = cube_scene(2, n_target=500, width=96, height=72)
    model = PoseModel(cs.mesh, ModelVariant.PLANAR4, FLOOR)
    cfg = OptimizerConfig()
    pose = PoseParams4(0.05, -0.04, 0.2, 1.08)
    lb, _ = evaluate_pose(model, pose, cs.obj, cs.scene, cfg)

    def f(theta):
        return evaluate_pose(model, model.pose(theta, pose), cs.obj, cs.scene, cfg, False)[0].total

    num = central_difference(f, model.theta(pose), 1e-4)
    assert np.linalg.norm(lb.gradient - num) / np.linalg.norm(num) < 1e-3


def test_fit_result_records_plane_heights():
    cs = cube_scene(3, n_target=300, width=64, height=48)
    res = fit_pose(cs.obj, cs.scene, ModelVariant.PLANAR4, OptimizerConfig(iterations=10))
    assert len(res.min_plane_y) >= len(res.history)
    assert max(abs(y) for y in res.min_plane_y) <= 1e-6

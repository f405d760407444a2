import math

import numpy as np
import pytest

from scenefit.errors import EmptyInput, ShapeMismatch, ValidationError
from scenefit.geometry import Aabb, BinaryMask, TriMesh
from scenefit.losses import (LossWeights, bbox_loss, dice_loss, focal_loss, point_to_mesh_loss,
                             total_loss)
from scenefit.raster import ProbMap

from oracles import bce, point_mesh_dist2
from scenes import cube_on_floor

SQUARE = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 1.0]]), np.array([[0, 1, 2], [0, 2, 3]]))
BOX = Aabb(np.array([0.0, 0.0, 0.0]), np.array([1.0, 1.0, 1.0]))


def val(d):
    return float(np.ravel(d.val)[0])


def test_dice_identity():
    m = np.random.default_rng(0).random((8, 8)) > 0.5
    assert val(dice_loss(m.astype(float), BinaryMask(m))) <= 1e-6


def test_dice_two_by_two():
    t = BinaryMask(np.array([[True, True], [False, False]]))
    assert abs(val(dice_loss(np.ones((2, 2)), t)) - 1 / 3) < 1e-9


def test_dice_disjoint():
    t = BinaryMask(np.array([[True, False], [False, False]]))
    pred = np.array([[0, 1], [1, 1.0]])
    assert abs(val(dice_loss(pred, t)) - 1.0) < 1e-6


def test_dice_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dice_loss(np.ones((2, 3)), BinaryMask(np.ones((2, 2), dtype=bool)))


def test_focal_single_pixel():
    v = val(focal_loss(np.array([[0.5]]), BinaryMask(np.array([[True]])), 0.25, 2.0))
    assert abs(v - 0.25 * 0.25 * math.log(2)) < 1e-9


def test_focal_perfect_prediction_at_clamp():
    m = np.array([[True, False], [False, True]])
    pred = np.where(m, 1 - 1e-6, 1e-6)
    assert val(focal_loss(pred, BinaryMask(m))) <= 1e-5


def test_focal_reduces_to_half_bce():
    rng = np.random.default_rng(1)
    for _ in range(5):
        p = rng.uniform(0.01, 0.99, size=(6, 7))
        m = rng.random((6, 7)) > 0.5
        squeezed = 1e-6 + (1 - 2e-6) * p
        assert abs(val(focal_loss(p, BinaryMask(m), 0.5, 0.0)) - 0.5 * bce(squeezed, m)) < 1e-9


def test_point_to_mesh_surface_samples():
    cube = cube_on_floor()
    pts, _ = cube.sample_surface(400, np.random.default_rng(2))
    assert val(point_to_mesh_loss(pts, cube)) <= 1e-12


def test_point_to_mesh_square():
    assert abs(val(point_to_mesh_loss(np.array([[0.25, 0.5, 0.25]]), SQUARE)) - 0.25) < 1e-9


def test_point_to_mesh_matches_oracle():
    rng = np.random.default_rng(4)
    n = 11
    gx, gz = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    verts = np.stack([gx.ravel(), 0.2 * rng.normal(size=n * n), gz.ravel()], axis=1)
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, i * n + j + 1, (i + 1) * n + j + 1, (i + 1) * n + j
            faces += [[a, b, c], [a, c, d]]
    mesh = TriMesh(verts, np.array(faces))
    assert len(mesh.faces) == 200
    pts = rng.uniform(-0.2, 1.2, size=(500, 3))
    expected = point_mesh_dist2(pts, verts, mesh.faces).mean()
    assert abs(val(point_to_mesh_loss(pts, mesh)) - expected) < 1e-9


def test_point_to_mesh_empty():
    with pytest.raises(EmptyInput):
        point_to_mesh_loss(np.zeros((0, 3)), SQUARE)


def test_bbox_inside_is_zero():
    assert val(bbox_loss(np.array([[0.5, 0.5, 0.5], [0, 1, 1.0]]), BOX)) == 0.0


def test_bbox_x_excursion():
    assert abs(val(bbox_loss(np.array([[1.5, 0.5, 0.5]]), BOX)) - 0.25) < 1e-12


def test_bbox_ignores_y():
    assert val(bbox_loss(np.array([[0.5, -100.0, 0.5], [0.5, 50.0, 0.5]]), BOX)) == 0.0


def test_total_weighted_sum():
    # silhouette 0.2 from Dice alone, geometric 0.3, bbox 0.1
    w = LossWeights(w_sil=1, w_3d=1, w_bbox=1, lambda_dice=1, lambda_focal=0)
    target = BinaryMask(np.array([[True, True], [False, False]]))
    pred = ProbMap(np.array([[1.0, 1.0], [0.5, 0.0]]))  # dice = 1 - 4/4.5 = 1/9
    mesh = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 0, 1.0]]), np.array([[0, 1, 2]]))
    pts = np.array([[0.25, math.sqrt(0.3), 0.25]])
    box = Aabb(np.array([0.0, 0, 0]), np.array([1.0 - math.sqrt(0.1), 1, 1]))
    lb = total_loss(pred, target, pts, mesh, box, w)
    assert abs(lb.silhouette - 1 / 9) < 1e-9
    assert abs(lb.geometric - 0.3) < 1e-12
    assert abs(lb.bbox - 0.1 / 3) < 1e-12
    assert abs(lb.total - (lb.silhouette + lb.geometric + lb.bbox)) < 1e-12


def test_total_weights_scale_components():
    w = LossWeights(w_sil=2.0, w_3d=0.5, w_bbox=3.0)
    target = BinaryMask(np.array([[True, False]]))
    pred = ProbMap(np.array([[0.7, 0.2]]))
    lb = total_loss(pred, target, np.array([[0.2, 0.4, 0.3]]), SQUARE, BOX, w)
    assert abs(lb.total - (2 * lb.silhouette + 0.5 * lb.geometric + 3 * lb.bbox)) < 1e-12


def test_total_zero_weights_leave_silhouette():
    w = LossWeights(w_3d=0, w_bbox=0)
    target = BinaryMask(np.array([[True, False]]))
    pred = ProbMap(np.array([[0.7, 0.2]]))
    sil = val(dice_loss(pred, target)) + val(focal_loss(pred, target))
    lb = total_loss(pred, target, np.zeros((0, 3)), SQUARE, BOX, w)
    assert abs(lb.total - sil) < 1e-12 and lb.geometric == 0 and lb.bbox == 0


def test_weight_validation():
    with pytest.raises(ValidationError):
        LossWeights(w_sil=-1)
    with pytest.raises(ValidationError):
        LossWeights(w_sil=0, w_3d=0)
    with pytest.raises(ValidationError):
        LossWeights(focal_alpha=1.0)

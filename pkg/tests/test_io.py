import struct

import numpy as np
import pytest

from scenefit.errors import BadMagic, BadVersion, ParseError, TruncatedPayload, UnsupportedVariant
from scenefit.geometry import BinaryMask, OrganizedPointMap, PointCloud, TriMesh
from scenefit.io import (atomic_write, decode_pmap, decode_png, encode_pmap, encode_png, load_mask,
                         load_obj, load_ply, load_pmap, load_rgb, read_json, save_mask, save_obj,
                         save_ply, save_pmap, save_rgb, write_json)


def random_mesh(rng, n=1000):
    verts = rng.normal(size=(n, 3)) * 10
    faces = np.stack([np.arange(n - 2), np.arange(1, n - 1), np.arange(2, n)], axis=1)
    return TriMesh(verts, faces)


def test_obj_round_trip_float32(tmp_path, rng):
    m = random_mesh(rng)
    save_obj(tmp_path / "m.obj", m)
    back = load_obj(tmp_path / "m.obj")
    assert np.array_equal(back.faces, m.faces)
    ulp = np.spacing(np.abs(m.vertices).astype(np.float32)).astype(np.float64)
    assert np.all(np.abs(back.vertices - m.vertices) <= ulp)


def test_obj_polygons_colors_negative_indices(tmp_path):
    (tmp_path / "q.obj").write_text(
        "# quad\nv 0 0 0 1 0 0\nv 1 0 0 0 1 0\nv 1 1 0 0 0 1\nv 0 1 0 1 1 1\nvn 0 0 1\nf 1/1/1 2 3 -1\n")
    m = load_obj(tmp_path / "q.obj")
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]] and m.colors.shape == (4, 3)


@pytest.mark.parametrize("text,err", [
    ("v 0 0\n", ParseError),
    ("v 0 0 0\nv 1 0 0\nf 1 2\n", UnsupportedVariant),
    ("v 0 0 0\nf 1 2 9\n", ParseError),
    ("v a b c\n", ParseError),
])
def test_obj_errors(tmp_path, text, err):
    (tmp_path / "bad.obj").write_text(text)
    with pytest.raises(err):
        load_obj(tmp_path / "bad.obj")


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip_with_confidence(tmp_path, rng, binary):
    c = PointCloud(rng.normal(size=(50, 3)), rng.uniform(0, 1, 50))
    save_ply(tmp_path / "c.ply", c, binary=binary)
    back = load_ply(tmp_path / "c.ply")
    assert back.confidence is not None
    assert np.allclose(back.points, c.points, atol=1e-6) and np.allclose(back.confidence, c.confidence, atol=1e-7)


def test_ply_truncated(tmp_path, rng):
    save_ply(tmp_path / "c.ply", PointCloud(rng.normal(size=(50, 3))))
    data = (tmp_path / "c.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(data[:-7])
    with pytest.raises(TruncatedPayload):
        load_ply(tmp_path / "t.ply")
    (tmp_path / "h.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex 3\n")
    with pytest.raises(TruncatedPayload):
        load_ply(tmp_path / "h.ply")


def test_ply_bad_magic(tmp_path):
    (tmp_path / "x.ply").write_bytes(b"nope\n")
    with pytest.raises(BadMagic):
        load_ply(tmp_path / "x.ply")


def test_ply_ascii_with_face_element(tmp_path):
    (tmp_path / "f.ply").write_text(
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
        "property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
        "0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    c = load_ply(tmp_path / "f.ply")
    assert len(c) == 3 and c.confidence is None


def test_pmap_round_trip_bit_exact():
    pts = np.arange(12, dtype=np.float32).reshape(2, 2, 3).astype(np.float64) / 7
    pts = pts.astype(np.float32).astype(np.float64)
    pm = OrganizedPointMap(pts, np.array([[0.5, 1.0], [0.25, 0.0]]), np.ones((2, 2), bool))
    back = decode_pmap(encode_pmap(pm))
    assert np.array_equal(back.points, pm.points) and np.array_equal(back.confidence, pm.confidence)
    assert np.array_equal(back.valid, pm.valid)


def test_pmap_nan_pixel_is_invalid(tmp_path):
    pts = np.zeros((2, 2, 3))
    pts[1, 0] = np.nan
    conf = np.ones((2, 2))
    conf[1, 0] = 0
    save_pmap(tmp_path / "p.pmap", OrganizedPointMap(pts, conf, np.ones((2, 2), bool)))
    back = load_pmap(tmp_path / "p.pmap")
    assert not back.valid[1, 0] and back.valid.sum() == 3


def test_pmap_errors():
    pm = OrganizedPointMap(np.zeros((2, 2, 3)), np.ones((2, 2)), np.ones((2, 2), bool))
    data = encode_pmap(pm)
    with pytest.raises(BadMagic):
        decode_pmap(b"XMAP" + data[4:])
    with pytest.raises(BadVersion):
        decode_pmap(data[:4] + struct.pack("<I", 9) + data[8:])
    with pytest.raises(TruncatedPayload):
        decode_pmap(data[:-1])
    with pytest.raises(TruncatedPayload):
        decode_pmap(data[:9])


def test_png_mask_and_rgb_round_trip(tmp_path, rng):
    m = BinaryMask(rng.random((7, 9)) > 0.5)
    save_mask(tmp_path / "m.png", m)
    assert np.array_equal(load_mask(tmp_path / "m.png").bits, m.bits)
    rgb = rng.integers(0, 256, (5, 6, 3), dtype=np.uint8)
    save_rgb(tmp_path / "i.png", rgb)
    assert np.array_equal(load_rgb(tmp_path / "i.png"), rgb)
    assert np.array_equal(decode_png(encode_png(rgb)), rgb)


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    with pytest.raises(RuntimeError):
        with atomic_write(tmp_path / "out.json", "w") as fh:
            fh.write("partial")
            raise RuntimeError("interrupted")
    assert list(tmp_path.iterdir()) == []


def test_json_round_trip(tmp_path):
    write_json(tmp_path / "a" / "x.json", {"b": 1, "a": [1.5]})
    assert read_json(tmp_path / "a" / "x.json") == {"a": [1.5], "b": 1}

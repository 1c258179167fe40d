import numpy as np
import pytest

from oracles import random_scene
from splatparse import io


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    scene = random_scene(rng, 25)
    scene = scene.replace(instance_ids=np.r_[np.full(5, -1), np.arange(20) % 3])
    path = io.write_ply(tmp_path / "s.ply", scene)
    back = io.read_ply(path)
    assert len(back) == len(scene)
    np.testing.assert_allclose(back.positions, scene.positions, atol=1e-6)
    np.testing.assert_allclose(back.scales, scene.scales, rtol=1e-6)
    np.testing.assert_allclose(back.opacities, scene.opacities, atol=1e-6)
    np.testing.assert_allclose(back.colors, scene.colors, atol=1e-6)
    np.testing.assert_allclose(back.covariances(), scene.covariances(), atol=1e-6)
    np.testing.assert_allclose(back.features, scene.features, atol=1e-5)
    np.testing.assert_array_equal(back.instance_ids, scene.instance_ids)
    np.testing.assert_allclose(back.background_color, scene.background_color)


def test_ply_header_is_3dgs_compatible(tmp_path):
    path = io.write_ply(tmp_path / "s.ply", random_scene(np.random.default_rng(1), 3))
    header = path.read_bytes().split(b"end_header")[0].decode()
    assert "format binary_little_endian 1.0" in header
    for name in ["x", "y", "z", "opacity", "scale_0", "scale_2", "rot_0", "rot_3", "f_dc_0", "f_dc_2",
                 "feature_0", "feature_15"]:
        assert f"property float {name}\n" in header
    assert "property int instance_id" in header


def test_ply_without_extension_fields(tmp_path):
    # a plain 3DGS export: no features, no labels, extra SH fields
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "f_rest_0", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    data = np.zeros(2, dtype=[(n, "<f4") for n in names])
    data["rot_0"] = 2.0  # unnormalized quaternion as saved by training code
    data["scale_0"] = data["scale_1"] = data["scale_2"] = -2.0
    head = "ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
    head += "".join(f"property float {n}\n" for n in names) + "end_header\n"
    p = tmp_path / "plain.ply"
    p.write_bytes(head.encode() + data.tobytes())
    scene = io.read_ply(p)
    assert np.all(scene.instance_ids == -1)
    np.testing.assert_allclose(scene.rotations[:, 0], 1.0)
    np.testing.assert_allclose(scene.opacities, 0.5)
    np.testing.assert_allclose(scene.colors, 0.5)


def test_ascii_ply_rejected(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(ValueError):
        io.read_ply(p)


def test_raw_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4, 16)).astype(np.float32)
    p = io.write_raw(tmp_path / "feat.f32", arr, kind="feature")
    back, header = io.read_raw(p)
    np.testing.assert_array_equal(back, arr)
    assert header["kind"] == "feature" and header["dtype"] == "<f4"


def test_depth_png_round_trip(tmp_path):
    d = np.array([[1.0, 2.0], [np.inf, 3.5]])
    p = io.write_depth_png(tmp_path / "d.png", d)
    back = io.read_depth_png(p)
    assert np.isinf(back[1, 0])
    np.testing.assert_allclose(back[np.isfinite(back)], [1.0, 2.0, 3.5], atol=2.5 / 65534)


def test_label_png_round_trip(tmp_path):
    lab = np.array([[0, 1, -1], [2, 65534, -1]])
    p = io.write_label_png(tmp_path / "l.png", lab)
    np.testing.assert_array_equal(io.read_label_map(p), lab)


def test_label_raw_import(tmp_path):
    lab = np.array([[3, -1], [0, 7]], dtype=np.int32)
    p = io.write_raw(tmp_path / "l.i32", lab)
    np.testing.assert_array_equal(io.read_label_map(p), lab)


def test_png_color(tmp_path):
    img = np.random.default_rng(0).uniform(size=(5, 6, 3))
    back = io.read_png(io.write_png(tmp_path / "c.png", img))
    assert back.shape == (5, 6, 3)
    assert np.max(np.abs(back / 255.0 - img)) <= 0.5 / 255 + 1e-12

import math

import numpy as np
import pytest

from oracles import brute_voxelize, pooled_majority, random_scene
from splatparse import voxels as V
from splatparse.gaussians import GaussianScene
from splatparse.synth import make_shape


def test_sphere_fraction():
    g = V.voxelize(V.sphere_test(0.5), 64)
    assert abs(g.fraction() / (math.pi / 48) - 1) <= 0.02


def test_full_cube_and_empty():
    assert V.voxelize(V.box_test((1.0, 1.0, 1.0)), 16).occupancy.all()
    with pytest.warns(UserWarning, match="empty"):
        g = V.voxelize(GaussianScene.empty(), 16)
    assert not g.occupancy.any()
    assert not V.voxelize(lambda p: np.zeros(len(p), bool), 8).occupancy.any()


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_splat_voxelization_matches_brute_force(backend):
    rng = np.random.default_rng(0)
    scene = random_scene(rng, 60, spread=1.1, scale=(0.05, 0.3))
    got = V.voxelize(scene, 24, backend=backend).occupancy.astype(bool)
    np.testing.assert_array_equal(got, brute_voxelize(scene, 24))


def test_backends_agree_on_shape():
    obj = make_shape("box", size=(0.7, 0.5, 0.3), n=600, rng=1)
    a = V.voxelize(obj, 32, backend="numba").occupancy
    b = V.voxelize(obj, 32, backend="numpy").occupancy
    np.testing.assert_array_equal(a, b)
    assert a.any()


def test_custom_domain():
    g = V.voxelize(V.sphere_test(1.0, (5, 5, 5)), 8, domain=((4, 4, 4), (6, 6, 6)))
    assert g.occupancy[3:5, 3:5, 3:5].all()
    assert not g.occupancy[0, 0, 0]
    np.testing.assert_allclose(g.cell_width, 0.25)


def test_grid_validation():
    with pytest.raises(ValueError):
        V.VoxelGrid(np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        V.VoxelGrid(np.full((4, 4, 4), 2))
    with pytest.raises(ValueError):
        V.VoxelGrid(np.zeros((4, 4, 5)))
    with pytest.raises(ValueError):
        V.voxelize(V.sphere_test(0.5), 2)


def test_encode_constant_grids():
    zero = V.encode_structure(V.VoxelGrid(np.zeros((16,) * 3, np.uint8)))
    assert zero.values.shape == (4, 4, 4, 4)
    assert np.all(zero.values[..., 0] == -1) and np.all(zero.values[..., 1:] == 0)
    one = V.encode_structure(V.VoxelGrid(np.ones((16,) * 3, np.uint8)))
    assert np.all(one.values[..., 0] == 1)
    np.testing.assert_allclose(one.values[..., 1:], 0, atol=1e-15)


def test_encode_offsets_point_to_occupied_corner():
    occ = np.zeros((8, 8, 8), np.uint8)
    occ[0, 0, 0] = 1  # lowest sub-cell of latent cell (0, 0, 0)
    lat = V.encode_structure(V.VoxelGrid(occ), 2)
    np.testing.assert_allclose(lat.values[0, 0, 0, 1:], [-0.75, -0.75, -0.75])
    assert lat.values[0, 0, 0, 0] == 2 / 64 - 1


@pytest.mark.parametrize("seed", range(5))
def test_round_trip_matches_pooling_oracle(seed):
    rng = np.random.default_rng(seed)
    occ = (rng.uniform(size=(16,) * 3) < rng.uniform(0.2, 0.8)).astype(np.uint8)
    lat = V.encode_structure(V.VoxelGrid(occ))
    pooled = pooled_majority(occ, 4)
    np.testing.assert_array_equal(V.pooled_occupancy(lat), pooled)
    dec = V.decode_structure(lat, 16)
    np.testing.assert_array_equal(dec.occupancy, np.kron(pooled, np.ones((4, 4, 4), np.uint8)))


def test_decode_constant_latents():
    assert not V.decode_structure(V.LatentGrid(-np.ones((4, 4, 4, 4))), 16).occupancy.any()
    assert V.decode_structure(V.LatentGrid(np.ones((4, 4, 4, 4))), 16).occupancy.all()


def test_threshold_is_strict_at_zero():
    lat = np.zeros((4, 4, 4, 4))
    assert not V.decode_structure(V.LatentGrid(lat)).occupancy.any()


def test_resolution_mismatch():
    with pytest.raises(ValueError):
        V.encode_structure(V.VoxelGrid(np.zeros((10,) * 3, np.uint8)), 4)
    with pytest.raises(ValueError):
        V.decode_structure(V.LatentGrid(np.zeros((4, 4, 4, 4))), 10)


def test_latent_validation():
    with pytest.raises(ValueError):
        V.LatentGrid(np.full((2, 2, 2, 4), np.nan))
    with pytest.raises(ValueError):
        V.LatentGrid(np.zeros((2, 3, 2, 4)))


def test_voxels_to_gaussians_round_trip():
    occ = (np.random.default_rng(3).uniform(size=(12,) * 3) < 0.4).astype(np.uint8)
    g = V.VoxelGrid(occ)
    back = V.voxelize(V.voxels_to_gaussians(g, label=2), 12)
    np.testing.assert_array_equal(back.occupancy, occ)


def test_iou():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[:2] = True
    b[1:3] = True
    assert V.voxel_iou(a, b) == pytest.approx(1 / 3)
    assert V.voxel_iou(np.zeros((4,) * 3), np.zeros((4,) * 3)) == 1.0


def test_raw_io(tmp_path):
    occ = (np.random.default_rng(4).uniform(size=(8,) * 3) < 0.5).astype(np.uint8)
    g = V.VoxelGrid(occ, ((0, 0, 0), (2, 2, 2)))
    V.write_voxels(tmp_path / "v.u8", g)
    back = V.read_voxels(tmp_path / "v.u8")
    np.testing.assert_array_equal(back.occupancy, occ)
    assert back.domain == g.domain
    lat = V.encode_structure(V.VoxelGrid(occ))
    V.write_latent(tmp_path / "l.f32", lat)
    np.testing.assert_allclose(V.read_latent(tmp_path / "l.f32").values, lat.values, atol=1e-7)


def test_primitive_library_deterministic():
    a = V.primitive_library(0, 5)
    b = V.primitive_library(0, 5)
    assert all(np.array_equal(x.occupancy, y.occupancy) for x, y in zip(a, b))
    assert all(x.occupancy.any() for x in a)

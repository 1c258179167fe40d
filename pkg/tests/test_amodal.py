import json

import numpy as np
import pytest

from oracles import random_amodal_pair, set_difference_mask
from splatparse import amodal as am
from splatparse import io


def _square_object(h=20, w=20):
    img = np.full((h, w, 3), 200.0)
    m = np.zeros((h, w), dtype=bool)
    m[5:15, 5:15] = True
    img[m] = [30.0, 60.0, 90.0]
    return img, m


def test_non_overlapping_occluder():
    img, m = _square_object()
    occ = np.full((4, 4, 3), 7.0)
    pair = am.composite_occlusion(img, m, occ, np.ones((4, 4), bool), (0, 0))
    np.testing.assert_array_equal(pair.visible_mask, pair.whole_mask)
    changed = np.any(pair.occluded_image != pair.whole_image, axis=-1)
    assert changed.any() and not np.any(changed & pair.whole_mask)


def test_half_plane_occluder():
    img, m = _square_object()
    occ_m = np.zeros((20, 20), bool)
    occ_m[:, :10] = True
    pair = am.composite_occlusion(img, m, np.zeros((20, 20, 3)), occ_m)
    assert pair.visible_mask.sum() * 2 == pair.whole_mask.sum()


def test_full_cover_raises():
    img, m = _square_object()
    with pytest.raises(ValueError, match="no visible support"):
        am.composite_occlusion(img, m, np.zeros((20, 20, 3)), np.ones((20, 20), bool))


def test_empty_occluder_raises():
    img, m = _square_object()
    with pytest.raises(ValueError):
        am.composite_occlusion(img, m, np.zeros((3, 3, 3)), np.zeros((3, 3), bool))


@pytest.mark.parametrize("seed", range(20))
def test_visible_mask_matches_pixel_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(8, 30, 2)
    img = rng.uniform(0, 255, (h, w, 3))
    m = rng.uniform(size=(h, w)) < 0.6
    oh, ow = rng.integers(1, 20, 2)
    occ_m = rng.uniform(size=(oh, ow)) < 0.7
    occ_m[0, 0] = True
    offset = (int(rng.integers(-oh, h)), int(rng.integers(-ow, w)))
    expected = set_difference_mask(m, occ_m, offset)
    if m.any() and not expected.any():
        return
    pair = am.composite_occlusion(img, m, rng.uniform(0, 255, (oh, ow, 3)), occ_m, offset)
    np.testing.assert_array_equal(pair.visible_mask, expected)


def test_pair_requires_subset():
    img, m = _square_object()
    with pytest.raises(ValueError):
        am.AmodalPair(img, m, img, ~m)


def test_blend_weights_linear():
    pair = random_amodal_pair(np.random.default_rng(0), (10, 12))
    clip = am.make_transition_clip(pair, 8, (12, 10))
    np.testing.assert_allclose(clip.alphas, 1 - np.arange(8) / 7)
    d = pair.difference_mask
    for i, a in enumerate(clip.alphas):
        expect = a * pair.occluded_image[d] + (1 - a) * pair.whole_image[d]
        np.testing.assert_allclose(clip.blended[i][d], expect, atol=1e-9)
    np.testing.assert_array_equal(clip.blended[0][d], pair.occluded_image[d])
    np.testing.assert_array_equal(clip.blended[-1], pair.whole_image)


def test_clip_shapes_and_first_frame():
    pair = random_amodal_pair(np.random.default_rng(1), (16, 16))
    clip = am.make_transition_clip(pair, 4, (32, 24))
    assert clip.frames.shape == (5, 24, 32, 3)
    assert clip.frame_size == (32, 24)
    np.testing.assert_allclose(clip.frames[0], am.normalize_frame(am.resize_image(pair.whole_image, (32, 24))))
    assert clip.frames.min() >= -1 and clip.frames.max() <= 1


def test_default_clip_is_512_with_nine_frames():
    pair = random_amodal_pair(np.random.default_rng(2), (8, 8))
    clip = am.make_transition_clip(pair)
    assert clip.frames.shape == (9, 512, 512, 3)


def test_identical_masks_give_constant_clip():
    pair = random_amodal_pair(np.random.default_rng(3), (12, 9))
    pair = am.AmodalPair(pair.whole_image, pair.whole_mask, pair.occluded_image, pair.whole_mask)
    clip = am.make_transition_clip(pair, 6, (20, 20))
    for f in clip.frames[1:]:
        np.testing.assert_array_equal(f, clip.frames[0])


def test_monotone_frames():
    pair = random_amodal_pair(np.random.default_rng(4), (10, 10))
    clip = am.make_transition_clip(pair, 8, (10, 10))
    d = np.diff(clip.blended[:, pair.difference_mask], axis=0)
    sign = np.sign(pair.whole_image - pair.occluded_image)[pair.difference_mask]
    assert np.all(d * sign[None] >= -1e-9)


def test_normalization_exact_on_8bit_values():
    v = np.arange(256, dtype=np.float64)
    n = am.normalize_frame(v)
    assert n[0] == -1.0 and n[255] == 1.0
    np.testing.assert_allclose(am.denormalize_frame(n), v, atol=1e-12)
    np.testing.assert_array_equal(n, v / 127.5 - 1)


def test_schedule_needs_two_frames():
    with pytest.raises(ValueError):
        am.blend_schedule(1)


@pytest.mark.parametrize("fmt", ["png", "raw"])
def test_export_clip(tmp_path, fmt):
    pair = random_amodal_pair(np.random.default_rng(5), (8, 10))
    clip = am.make_transition_clip(pair, 3, (10, 8))
    paths = am.export_clip(tmp_path, clip, fmt=fmt, pair=pair)
    assert all(p.exists() for p in paths)
    meta = json.loads((tmp_path / "clip.json").read_text())
    assert meta["N"] == 3 and meta["alphas"] == [1.0, 0.5, 0.0]
    if fmt == "raw":
        frames, _ = io.read_raw(tmp_path / "frames.f32")
        np.testing.assert_allclose(frames, clip.frames, atol=1e-6)
    else:
        assert len(meta["frames"]) == 4
        first = io.read_png(tmp_path / meta["frames"][0]).astype(np.float64)
        np.testing.assert_allclose(first, am.denormalize_frame(clip.frames[0]), atol=0.5 + 1e-9)
    back = io.read_png(tmp_path / meta["masks"]["visible"]) > 0
    np.testing.assert_array_equal(back, pair.visible_mask)


def test_forced_area_light():
    for seed in range(50):
        cfg = am.sample_lighting(seed, p=0.5)
        a = cfg.area
        assert cfg.kind == "area" and cfg.sun is None
        assert 4 <= a.radius <= 6 and 800 <= a.energy <= 1200 and 0.8 <= a.size <= 1.2
        assert 40 <= a.elevation_deg <= 89.9 and 0 <= a.azimuth_deg < 360


def test_forced_sun_light():
    cfg = am.sample_lighting(0, p=0.1)
    assert cfg.kind == "sun" and cfg.area is None
    assert 0.1 <= cfg.sun.angle <= 0.5
    assert [e for e, _ in cfg.sun.lights] == [5.0, 3.0, 3.0, 3.0]
    assert [r for _, r in cfg.sun.lights] == [0.0, 90.0, 180.0, 270.0]


def test_boundary_p_is_sun():
    assert am.sample_lighting(0, p=0.2).kind == "sun"


def test_area_frequency():
    b = am.sample_lighting_batch(np.random.default_rng(0), 10_000)
    assert abs(b["is_area"].mean() - 0.8) <= 0.02


def test_lighting_deterministic_and_json():
    a = am.sample_lighting(np.random.default_rng(9))
    b = am.sample_lighting(np.random.default_rng(9))
    assert a == b
    for p in (0.1, 0.9):
        cfg = am.sample_lighting(1, p=p)
        assert am.LightingConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_miou_cases():
    m = np.zeros((10, 10), bool)
    m[2:6, 2:6] = True
    assert am.amodal_miou([m], [m]) == 1.0
    other = np.zeros_like(m)
    other[7:, 7:] = True
    assert am.amodal_miou([m], [other]) == 0.0
    a = np.zeros((4, 6), bool)
    b = np.zeros((4, 6), bool)
    a[:, 0:4] = True
    b[:, 2:6] = True
    assert abs(am.amodal_miou([a], [b]) - 1 / 3) <= 1e-12
    empty = np.zeros((3, 3), bool)
    assert am.amodal_miou([empty, m], [empty, other]) == 0.5


def test_miou_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    preds = [rng.uniform(size=(9, 9)) < 0.5 for _ in range(10)]
    gts = [rng.uniform(size=(9, 9)) < 0.5 for _ in range(10)]
    v = am.amodal_miou(preds, gts)
    assert v == am.amodal_miou(gts, preds)
    assert 0.0 <= v <= 1.0


def test_miou_errors():
    with pytest.raises(ValueError):
        am.amodal_miou([np.zeros((2, 2))], [np.zeros((3, 2))])
    with pytest.raises(ValueError):
        am.amodal_miou([np.zeros((2, 2))], [])

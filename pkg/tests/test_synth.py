import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poseur.errors import ConfigurationError, ContractViolation, FormatError
from poseur.synth import (
    PALETTE,
    SynthConfig,
    aspect_bbox,
    crop_resize,
    disc_radius,
    generate_scene,
    read_dataset,
    read_manifest,
    synth_generate,
    write_dataset,
)


def test_regeneration_is_bit_identical():
    cfg = SynthConfig()
    a = generate_scene(11, 4, cfg)
    b = generate_scene(11, 4, cfg)
    assert a.image.tobytes() == b.image.tobytes()
    np.testing.assert_array_equal(a.instances[0].keypoints, b.instances[0].keypoints)
    assert generate_scene(11, 5, cfg).image.tobytes() != a.image.tobytes()


def test_keypoints_inside_image_for_many_scenes():
    cfg = SynthConfig(image_size=(64, 48))
    for scene in synth_generate(2, 10_000, cfg, render_image=False):
        pts = scene.instances[0].keypoints
        assert np.all(pts >= 0) and np.all(pts[:, 0] < 48) and np.all(pts[:, 1] < 64)


def test_multi_figure_scenes_stay_inside():
    cfg = SynthConfig(figures_per_image=4)
    for scene in synth_generate(3, 200, cfg, render_image=False):
        assert len(scene.instances) == 4
        for inst in scene.instances:
            assert np.all(inst.keypoints >= 0) and np.all(inst.keypoints < 64)


def test_joint_pixels_carry_their_disc_color():
    cfg = SynthConfig()
    r = disc_radius(cfg.image_size)
    checked = 0
    for scene in synth_generate(5, 30, cfg):
        pts = scene.instances[0].keypoints
        for j, p in enumerate(pts):
            later = pts[j + 1 :]
            if len(later) and np.min(np.linalg.norm(later - p, axis=1)) < 2 * r + 2:
                continue  # a later disc may paint over this one
            col, row = int(p[0]), int(p[1])
            np.testing.assert_allclose(scene.image[:, row, col], PALETTE[j], atol=1e-6)
            checked += 1
    assert checked > 100


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SynthConfig(num_keypoints=1)
    with pytest.raises(ConfigurationError):
        SynthConfig(figures_per_image=0)
    with pytest.raises(ContractViolation):
        synth_generate(0, 0)


def test_crop_identity():
    scene = generate_scene(1, 0, SynthConfig())
    kps = scene.instances[0].keypoints
    patch, norm, tf = crop_resize(scene.image, kps, (0, 0, 64, 64), (64, 64))
    np.testing.assert_allclose(patch, scene.image, atol=1e-12)
    np.testing.assert_allclose(tf.denormalize(norm), kps, atol=1e-12)
    np.testing.assert_allclose(norm * 64, kps, atol=1e-12)


def test_bbox_center_maps_to_half():
    _, norm, _ = crop_resize(np.zeros((3, 20, 20)), np.array([[7.0, 9.0]]), (3, 5, 8, 8), (16, 16))
    np.testing.assert_allclose(norm, [[0.5, 0.5]])


@given(
    box=st.tuples(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.5, 50), st.floats(0.5, 50)),
    pts=st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=1, max_size=8),
    out=st.tuples(st.integers(4, 96), st.integers(4, 96)),
)
def test_crop_round_trip(box, pts, out):
    _, norm, tf = crop_resize(np.zeros((3, 4, 4)), np.array(pts), box, out)
    np.testing.assert_allclose(tf.denormalize(norm), pts, atol=1e-9, rtol=0)


def test_degenerate_bbox():
    with pytest.raises(ContractViolation):
        crop_resize(np.zeros((3, 4, 4)), None, (0, 0, 0, 3), (8, 8))


def test_aspect_bbox_matches_patch_ratio():
    x, y, w, h = aspect_bbox((10, 10, 20, 40), (64, 48), expand=1.25)
    assert w / h == pytest.approx(48 / 64)
    assert (x + w / 2, y + h / 2) == pytest.approx((20, 30))
    assert h == pytest.approx(50)


def test_dataset_directory_round_trip(tmp_path):
    manifest = write_dataset(tmp_path, 9, 3)
    assert manifest == read_manifest(tmp_path)
    assert {"format_version", "count", "num_keypoints", "image_size", "seed"} <= set(manifest)
    _, scenes = read_dataset(tmp_path)
    for i, scene in enumerate(scenes):
        fresh = generate_scene(9, i, SynthConfig())
        assert scene.image.tobytes() == fresh.image.astype("<f4").tobytes()
        np.testing.assert_array_equal(scene.instances[0].keypoints, fresh.instances[0].keypoints)
    assert len((tmp_path / "annotations.jsonl").read_text().splitlines()) == 3


def test_dataset_version_checked(tmp_path):
    write_dataset(tmp_path, 0, 1)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["format_version"] = 2
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(FormatError):
        read_manifest(tmp_path)
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "missing")

import math

import numpy as np
import pytest

from fisheye_supcon.dataset import parse_annotation_file, read_pool
from fisheye_supcon.errors import ValidationError
from fisheye_supcon.geometry import FisheyeCalibration, RadialLevels, distortion_at
from fisheye_supcon.rng import substream
from fisheye_supcon.synthgen import (
    GeneratorConfig,
    generate_patch_pool,
    generate_scene_annotations,
    render_patch,
    sample_scenes,
    shape_coverage,
    warp_scale,
)

CAL = FisheyeCalibration()


def axis_ratio(mask):
    """Minor/major axis ratio from the mask's second central moments."""
    ys, xs = np.indices(mask.shape)
    m = mask.sum()
    cx, cy = (xs * mask).sum() / m, (ys * mask).sum() / m
    cov = np.array([
        [((xs - cx) ** 2 * mask).sum(), ((xs - cx) * (ys - cy) * mask).sum()],
        [((xs - cx) * (ys - cy) * mask).sum(), ((ys - cy) ** 2 * mask).sum()],
    ]) / m
    lo, hi = np.linalg.eigvalsh(cov)
    return math.sqrt(lo / hi)


@pytest.mark.parametrize("rho", [0.3, 0.5, 0.7])
@pytest.mark.parametrize("angle", [0.0, 0.7])
def test_disc_axis_ratio_matches_warp(rho, angle):
    mask = shape_coverage(0, rho, 160, CAL, angle)
    expected = 1.0 / (1.0 + distortion_at(CAL, rho))
    assert axis_ratio(mask) == pytest.approx(expected, rel=0.01)


def test_warp_monotone_in_radius():
    ratios = [axis_ratio(shape_coverage(0, r, 96, CAL, 0.3)) for r in np.linspace(0, 0.7072, 10)]
    assert all(b <= a + 1e-9 for a, b in zip(ratios, ratios[1:]))


def test_center_is_unwarped():
    assert warp_scale(CAL, 0.0) == 1.0
    for c in range(5):
        base = shape_coverage(c, 0.0, 32, CAL, 1.1)
        straight = shape_coverage(c, 0.0, 32, FisheyeCalibration(0, 0, 0, 0), 1.1)
        np.testing.assert_array_equal(base, straight)


def test_classes_are_distinct():
    masks = [shape_coverage(c, 0.0, 32, CAL) for c in range(5)]
    for i in range(5):
        for j in range(i + 1, 5):
            assert np.abs(masks[i] - masks[j]).sum() > 20


def test_render_patch_determinism_and_range():
    a = render_patch(3, 0.4, 32, CAL, 0.05, substream(1, "t"), 0.2, jitter=1.0)
    b = render_patch(3, 0.4, 32, CAL, 0.05, substream(1, "t"), 0.2, jitter=1.0)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (32, 32, 1) and a.min() >= 0 and a.max() <= 1


@pytest.mark.parametrize("kw", [dict(class_id=5, rho=0.1), dict(class_id=0, rho=0.8)])
def test_render_patch_preconditions(kw):
    with pytest.raises(ValidationError):
        render_patch(size=16, cal=CAL, noise_std=0.0, rng=np.random.default_rng(0), **kw)


@pytest.mark.parametrize("kw", [dict(size_range=(0.1, 0.6)), dict(size_range=(0.0, 0.1)),
                                dict(noise_std=-0.1), dict(scheme="nope"), dict(class_weights=(1, 1))])
def test_config_invariants(kw):
    with pytest.raises(ValidationError):
        GeneratorConfig(**kw)


def test_config_dict_round_trip():
    cfg = GeneratorConfig(seed=3, calibration=FisheyeCalibration(0.1, 0.2, 0.3, 0.4), size_range=(0.1, 0.2))
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        GeneratorConfig.from_dict({"sed": 1})


def test_empty_generation(tmp_path):
    manifest, tally = generate_scene_annotations(GeneratorConfig(num_images=0), tmp_path)
    assert manifest.items == [] and tally.total == 0


def test_scene_files_are_deterministic_and_parse(tmp_path):
    cfg = GeneratorConfig(seed=11, num_images=6, image_size=48)
    m1, t1 = generate_scene_annotations(cfg, tmp_path / "a")
    m2, t2 = generate_scene_annotations(cfg, tmp_path / "b")
    np.testing.assert_array_equal(t1.counts, t2.counts)
    total = 0
    for img, ann in m1.items:
        for sub in ("a", "b"):
            assert (tmp_path / "a" / ann).read_bytes() == (tmp_path / sub / ann).read_bytes()
            assert (tmp_path / "a" / img).read_bytes() == (tmp_path / sub / img).read_bytes()
        total += len(parse_annotation_file((tmp_path / "a" / ann).read_text()))
    assert total == t1.total


def test_positions_keep_half_the_box_on_frame():
    scenes, _ = sample_scenes(GeneratorConfig(seed=2, num_images=200, size_range=(0.3, 0.5)))
    for objs in scenes:
        for a in objs:
            on_x = min(a.center.x + a.width / 2, 1) - max(a.center.x - a.width / 2, 0)
            on_y = min(a.center.y + a.height / 2, 1) - max(a.center.y - a.height / 2, 0)
            assert on_x * on_y >= 0.5 * a.width * a.height - 1e-12


def test_center_fraction_matches_area_ratio():
    _, tally = sample_scenes(GeneratorConfig(seed=0, num_images=1400))
    assert tally.total >= 10_000
    assert tally.center_fraction() == pytest.approx(0.25, abs=0.02)


def test_class_counts_within_binomial_bounds():
    weights = np.array([1.0, 2.0, 3.0, 1.0, 3.0])
    _, tally = sample_scenes(GeneratorConfig(seed=5, num_images=600, class_weights=tuple(weights)))
    n = tally.total
    p = weights / weights.sum()
    counts = tally.counts.sum(axis=1)
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


def test_pool_count_and_file(tmp_path):
    cfg = GeneratorConfig(seed=4, num_images=12, objects_per_image=(8, 9))
    pool, tally = generate_patch_pool(cfg, tmp_path / "p.fepp")
    assert len(pool) == tally.total
    back = read_pool(tmp_path / "p.fepp")
    assert len(back) == len(pool)
    counts = np.zeros_like(tally.counts)
    for p in pool:
        counts[p.semantic_class, p.distortion_level] += 1
    np.testing.assert_array_equal(counts, tally.counts)


def test_center_only_gives_level_zero():
    pool, _ = generate_patch_pool(GeneratorConfig(seed=1, num_images=10, center_only=True, scheme="levels:4"))
    assert pool and all(p.distortion_level == 0 for p in pool)
    assert RadialLevels(4).num_levels == pool[0].num_levels

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dupr.geometry import (ORIGINAL, VIEW1, AugmentConfig, Box, PatchCorrespondence, Photometric,
                           SamplingError, ViewTransform, bilinear_matrix, box_iou,
                           identity_transform, intersection_boxes, patch_correspondence,
                           render_view, sample_augmentation, sample_roi_at_iou)
from dupr.tensor import ConfigError, UsageError


def _t(crop, size=64, flip=False):
    return ViewTransform(Box(*crop), (size, size), flip)


# ---------------------------------------------------------------- sampling

def test_degenerate_scale_range_gives_full_crop():
    cfg = AugmentConfig(scale=(1.0, 1.0), ratio=(1.0, 1.0), flip_prob=0.0)
    t = sample_augmentation(np.random.default_rng(0), (64, 64), cfg)
    assert t.crop.as_tuple() == pytest.approx((0, 0, 64, 64))
    assert not t.hflip


def test_sampling_is_reproducible():
    a = sample_augmentation(np.random.default_rng(7), (80, 60))
    b = sample_augmentation(np.random.default_rng(7), (80, 60))
    assert a == b


def test_flip_frequency_binomial_bound():
    rng = np.random.default_rng(3)
    flips = sum(sample_augmentation(rng, (64, 64)).hflip for _ in range(10_000))
    assert 0.45 <= flips / 10_000 <= 0.55


@pytest.mark.parametrize("scale", [(0.0, 1.0), (0.5, 1.2), (0.8, 0.4)])
def test_bad_scale_range(scale):
    with pytest.raises(ConfigError):
        sample_augmentation(np.random.default_rng(0), (64, 64), AugmentConfig(scale=scale))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), w=st.integers(16, 128), h=st.integers(16, 128))
def test_crop_inside_source_and_params_in_range(seed, w, h):
    cfg = AugmentConfig()
    t = sample_augmentation(np.random.default_rng(seed), (w, h), cfg)
    c = t.crop
    assert 0 <= c.x_min <= c.x_max <= w + 1e-9 and 0 <= c.y_min <= c.y_max <= h + 1e-9
    p = t.photometric
    assert 1 - cfg.brightness <= p.brightness <= 1 + cfg.brightness
    assert abs(p.hue) <= cfg.hue
    assert p.blur_sigma == 0.0 or cfg.blur_sigma[0] <= p.blur_sigma <= cfg.blur_sigma[1]


# ---------------------------------------------------------------- rendering

def test_identity_render_is_exact():
    img = np.random.default_rng(0).uniform(size=(12, 10, 3))
    np.testing.assert_allclose(render_view(img, identity_transform((10, 12))), img, atol=1e-15)


def test_flip_mirrors_columns():
    img = np.random.default_rng(1).uniform(size=(8, 8, 3))
    t = replace(identity_transform((8, 8)), hflip=True)
    out = render_view(img, t)
    for c in range(8):
        np.testing.assert_allclose(out[:, c], img[:, 7 - c], atol=1e-15)


def test_downscaled_ramp_stays_linear():
    w = 64
    ramp = np.tile(((np.arange(w) + 0.5) / w * 0.5)[None, :, None], (w, 1, 3))
    t = ViewTransform(Box(0, 0, w, w), (w // 2, w // 2))
    out = render_view(ramp, t)[0, :, 0]
    expect = (np.arange(w // 2) + 0.5) * 2 / w * 0.5
    assert np.abs(out - expect).max() <= 1e-6
    assert np.allclose(np.diff(out), 2 * np.diff(ramp[0, :2, 0]))


def test_photometric_stays_in_unit_range():
    img = np.random.default_rng(2).uniform(size=(16, 16, 3))
    t = replace(identity_transform((16, 16)),
                photometric=Photometric(1.4, 1.4, 1.4, 0.1, False, 0.5))
    out = render_view(img, t)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_bilinear_rows_sum_to_one_inside():
    m = bilinear_matrix(np.linspace(0.0, 10.0, 41), 10)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-15)
    assert bilinear_matrix(np.array([-2.0, 12.0]), 10).sum() == 0.0


# ---------------------------------------------------------------- coordinates

@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_round_trip(seed):
    rng = np.random.default_rng(seed)
    t = sample_augmentation(rng, (64, 64))
    x = rng.uniform(t.crop.x_min, t.crop.x_max, 20)
    y = rng.uniform(t.crop.y_min, t.crop.y_max, 20)
    bx, by = t.view_to_original(*t.original_to_view(x, y))
    assert np.abs(bx - x).max() <= 1e-9 and np.abs(by - y).max() <= 1e-9


def test_flip_is_continuous_mirror():
    t = _t((0, 0, 64, 64), flip=True)
    vx, _ = t.original_to_view(np.array([0.0, 0.5, 64.0]), np.zeros(3))
    np.testing.assert_allclose(vx, [64.0, 63.5, 0.0])


# ---------------------------------------------------------------- intersections

def test_intersection_example():
    t1, t2 = _t((0, 0, 100, 100)), _t((50, 50, 150, 150))
    b1, b2 = intersection_boxes(t1, t2)
    assert t1.crop.intersect(t2.crop).as_tuple() == (50, 50, 100, 100)
    assert b1.as_tuple() == pytest.approx((32, 32, 64, 64))
    assert b2.as_tuple() == pytest.approx((0, 0, 32, 32))
    assert b1.frame == VIEW1


def test_intersection_identical_views_cover_everything():
    t = _t((10, 5, 60, 55))
    b1, b2 = intersection_boxes(t, t)
    assert b1.as_tuple() == pytest.approx((0, 0, 64, 64)) == b2.as_tuple()


def test_intersection_disjoint_and_tiny():
    assert intersection_boxes(_t((0, 0, 50, 50)), _t((100, 100, 150, 150))) is None
    assert intersection_boxes(_t((0, 0, 50, 50)), _t((49.9, 49.9, 99, 99))) is None


def test_intersection_flip_aware():
    b1, _ = intersection_boxes(_t((0, 0, 100, 100), flip=True), _t((50, 50, 150, 150)))
    assert b1.as_tuple() == pytest.approx((0, 32, 32, 64))


# ---------------------------------------------------------------- correspondence

def test_correspondence_identity_without_flips():
    c = patch_correspondence(_t((0, 0, 64, 64)), _t((0, 0, 64, 64)), 3)
    assert all(a == b for a, b in c.pairs)


def test_correspondence_single_flip_mirrors():
    c = patch_correspondence(_t((0, 0, 64, 64)), _t((0, 0, 64, 64), flip=True), 3)
    assert c.map(0, 0) == (0, 2) and c.map(1, 1) == (1, 1) and c.map(2, 2) == (2, 0)
    both = patch_correspondence(_t((0, 0, 64, 64), flip=True), _t((0, 0, 64, 64), flip=True), 3)
    assert not both.mirrored


@given(S=st.integers(1, 9), mirrored=st.booleans())
def test_correspondence_is_an_involution(S, mirrored):
    c = PatchCorrespondence(S, mirrored)
    idx = c.index()
    np.testing.assert_array_equal(idx[idx], np.arange(S * S))
    assert sorted(idx) == list(range(S * S))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_matched_patch_centers_coincide(seed):
    rng = np.random.default_rng(seed)
    S = 4
    while True:
        t1, t2 = sample_augmentation(rng, (64, 64)), sample_augmentation(rng, (64, 64))
        boxes = intersection_boxes(t1, t2)
        if boxes is not None:
            break
    b1, b2 = boxes
    corr = patch_correspondence(t1, t2, S)

    def center(b, t, i, j):
        x = b.x_min + (j + 0.5) * b.width / S
        y = b.y_min + (i + 0.5) * b.height / S
        return np.array(t.view_to_original(x, y), dtype=float)

    cell_w = t1.crop.intersect(t2.crop).width / S
    for (i, j), (i2, j2) in corr.pairs:
        d = np.abs(center(b1, t1, i, j) - center(b2, t2, i2, j2))
        assert d.max() <= cell_w / 2 + 1e-9


# ---------------------------------------------------------------- IoU

def test_iou_examples():
    a = Box(0, 0, 2, 2)
    assert box_iou(a, a) == 1.0
    assert box_iou(a, Box(5, 5, 6, 6)) == 0.0
    assert box_iou(a, Box(1, 0, 3, 2)) == pytest.approx(2 / 6)


def test_iou_frame_mismatch():
    with pytest.raises(UsageError):
        box_iou(Box(0, 0, 1, 1), Box(0, 0, 1, 1, VIEW1))


@given(st.lists(st.floats(0, 50), min_size=8, max_size=8))
def test_iou_in_unit_interval_and_symmetric(v):
    a = Box(min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]), max(v[2], v[3]))
    b = Box(min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]), max(v[6], v[7]))
    assert 0.0 <= box_iou(a, b) <= 1.0
    assert box_iou(a, b) == box_iou(b, a)


def test_roi_at_iou_targets():
    rng = np.random.default_rng(0)
    gt = Box(20, 20, 40, 44)
    assert sample_roi_at_iou(rng, gt, 1.0, (64, 64)) == gt
    far = sample_roi_at_iou(rng, gt, 0.0, (64, 64))
    assert box_iou(far, gt) == 0.0
    assert 0 <= far.x_min and far.x_max <= 64 and far.y_max <= 64
    for target in np.linspace(0.05, 0.95, 10):
        got = box_iou(sample_roi_at_iou(rng, gt, target, (64, 64)), gt)
        assert abs(got - target) <= 0.05


def test_roi_at_iou_unreachable():
    # a full-image gt leaves only shrunken boxes, which cannot drop to IoU 0
    with pytest.raises(SamplingError):
        sample_roi_at_iou(np.random.default_rng(0), Box(0, 0, 8, 8), 0.0, (8, 8), max_trials=2000)


def test_roi_at_iou_rejects_bad_target():
    with pytest.raises(ValueError):
        sample_roi_at_iou(np.random.default_rng(0), Box(0, 0, 8, 8), 1.5, (8, 8))


def test_box_frame_defaults_and_inversion():
    assert Box(0, 0, 1, 1).frame == ORIGINAL
    with pytest.raises(ValueError):
        Box(2, 0, 1, 1)

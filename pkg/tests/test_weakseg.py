import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milseg.errors import ConfigurationError
from milseg.model import ModelConfig, build
from milseg.weakseg import (
    StructuringElement,
    activation_map,
    dilate,
    erode,
    iou,
    largest_component,
    opening,
    postprocess,
    segment,
    threshold,
)


def offsets(z):
    return [(i - z.anchor_row, j - z.anchor_col) for i in range(z.height) for j in range(z.width)]


def naive_erode(mask, z):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for r in range(h):
        for c in range(w):
            out[r, c] = all(0 <= r + dr < h and 0 <= c + dc < w and mask[r + dr, c + dc] for dr, dc in offsets(z))
    return out


def naive_dilate(mask, z):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for r in range(h):
        for c in range(w):
            out[r, c] = any(0 <= r - dr < h and 0 <= c - dc < w and mask[r - dr, c - dc] for dr, dc in offsets(z))
    return out


def random_masks(n, shape=(12, 12), seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random(shape) < rng.uniform(0.3, 0.8) for _ in range(n)]


# -- erosion / dilation --------------------------------------------------------------------


def test_erode_full_square_loses_border():
    out = erode(np.ones((30, 30), bool), StructuringElement.square(3))
    expected = np.zeros((30, 30), bool)
    expected[1:-1, 1:-1] = True
    np.testing.assert_array_equal(out, expected)


def test_dilate_single_pixel():
    mask = np.zeros((9, 9), bool)
    mask[4, 4] = True
    expected = np.zeros((9, 9), bool)
    expected[3:6, 3:6] = True
    np.testing.assert_array_equal(dilate(mask, StructuringElement.square(3)), expected)


@pytest.mark.parametrize("h,w", [(3, 3), (2, 2), (4, 3), (1, 5)])
def test_erode_dilate_match_window_oracle(h, w):
    z = StructuringElement(h, w)
    for mask in random_masks(10, seed=h * 10 + w):
        np.testing.assert_array_equal(erode(mask, z), naive_erode(mask, z))
        np.testing.assert_array_equal(dilate(mask, z), naive_dilate(mask, z))


def test_opening_keeps_square_that_contains_element():
    mask = np.zeros((60, 60), bool)
    mask[10:35, 20:45] = True
    np.testing.assert_array_equal(opening(mask, StructuringElement.square(20)), mask)


def test_opening_removes_small_blob():
    mask = np.zeros((60, 60), bool)
    mask[5:10, 5:10] = True
    assert not opening(mask, StructuringElement.square(20)).any()
    assert not opening(np.zeros((30, 30), bool), StructuringElement.square(20)).any()


def test_element_too_large():
    with pytest.raises(ConfigurationError):
        erode(np.ones((4, 4), bool), StructuringElement.square(5))


def test_element_scaling():
    assert StructuringElement.for_image(250) == StructuringElement.square(20)
    assert StructuringElement.for_image(64) == StructuringElement.square(5)


@pytest.mark.parametrize("side", [2, 3, 4])
def test_opening_properties(side):
    z = StructuringElement.square(side)
    masks = random_masks(100, seed=side)
    for a in masks:
        once = opening(a, z)
        np.testing.assert_array_equal(opening(once, z), once)  # idempotent
        assert not (once & ~a).any()  # anti-extensive
    for a in masks[:30]:
        b = a | (np.random.default_rng(1).random(a.shape) < 0.2)  # a is a subset of b
        assert not (opening(a, z) & ~opening(b, z)).any()  # increasing


@pytest.mark.parametrize("h,w", [(3, 3), (2, 2), (2, 3)])
def test_duality(h, w):
    z = StructuringElement(h, w)
    for mask in random_masks(20, seed=7):
        np.testing.assert_array_equal(erode(mask, z), ~dilate(~mask, z.reflected(), border_value=True))
        np.testing.assert_array_equal(dilate(mask, z), ~erode(~mask, z.reflected(), border_value=True))


# -- components ------------------------------------------------------------------------------


def test_largest_component_keeps_bigger_blob():
    mask = np.zeros((20, 20), bool)
    mask[0:5, 0:8] = True  # 40 pixels
    mask[10:17, 15] = True  # 7 pixels
    out = largest_component(mask)
    assert out.sum() == 40 and out[0:5, 0:8].all()


def test_largest_component_single_and_empty():
    mask = np.zeros((6, 6), bool)
    mask[1:3, 1:4] = True
    np.testing.assert_array_equal(largest_component(mask), mask)
    assert not largest_component(np.zeros((4, 4), bool)).any()


def test_largest_component_tie_break():
    mask = np.zeros((10, 10), bool)
    mask[6:8, 0:2] = True  # anchor (6, 0)
    mask[2:4, 7:9] = True  # anchor (2, 7): earlier in row-major order
    out = largest_component(mask)
    assert out[2:4, 7:9].all() and out.sum() == 4


def test_largest_component_uses_four_connectivity():
    mask = np.zeros((5, 5), bool)
    mask[0, 0] = mask[1, 1] = mask[2, 2] = True  # diagonal chain: three components
    mask[4, 0:2] = True
    out = largest_component(mask)
    assert out.sum() == 2 and out[4, 0:2].all()


# -- activation map / threshold -------------------------------------------------------------


def test_activation_map_single_channel():
    act = np.random.default_rng(0).random((1, 1, 4, 5))
    expected = (act[0, 0] - act[0, 0].min()) / np.ptp(act[0, 0])
    np.testing.assert_allclose(activation_map(act), expected)


def test_activation_map_constant_is_zero():
    act = np.stack([np.zeros((4, 4)), np.ones((4, 4))])[None]
    np.testing.assert_array_equal(activation_map(act), np.zeros((4, 4)))


def test_activation_map_loop_oracle():
    act = np.random.default_rng(3).random((2, 3, 4, 4))
    mean = np.zeros((4, 4))
    for r in range(4):
        for c in range(4):
            mean[r, c] = sum(act[1, ch, r, c] for ch in range(3)) / 3
    lo, hi = mean.min(), mean.max()
    np.testing.assert_allclose(activation_map(act, 1), (mean - lo) / (hi - lo), atol=1e-12)


def test_threshold_rules():
    np.testing.assert_array_equal(threshold(np.array([0.2, 0.8]), 0.5), [False, True])
    values = np.random.default_rng(0).random(50) + 1e-3
    assert threshold(values, 1e-9).all()
    taus = np.linspace(0.01, 0.99, 30)
    counts = [threshold(values, t).sum() for t in taus]
    assert all(b <= a for a, b in zip(counts, counts[1:]))


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(0.01, 100), offset=st.floats(-50, 50), seed=st.integers(0, 1000))
def test_pipeline_affine_invariance(scale, offset, seed):
    act = np.random.default_rng(seed).random((1, 2, 16, 16))
    z = StructuringElement.square(3)
    base = postprocess(activation_map(act), 0.5, z)
    scaled = postprocess(activation_map(act * scale + offset), 0.5, z)
    np.testing.assert_array_equal(base, scaled)


# -- segment / iou -----------------------------------------------------------------------------


def test_segment_is_deterministic_and_sized():
    cfg = ModelConfig(input_size=32, base_channels=4, max_channels=8, depth=4)
    image = np.random.default_rng(0).random((32, 32))
    h1, m1 = segment(build(cfg), image)
    h2, m2 = segment(build(cfg), image)
    assert h1.shape == m1.shape == (32, 32)
    np.testing.assert_array_equal(h1, h2)
    np.testing.assert_array_equal(m1, m2)
    assert 0 <= h1.min() and h1.max() <= 1


def test_iou():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    assert iou(a, b) == 1.0
    a[0, :2] = True
    b[0, 1:3] = True
    assert iou(a, b) == pytest.approx(1 / 3)

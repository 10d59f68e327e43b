import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ordigrade import preprocess as P


def disc_image(size=64, cy=30, cx=34, r=14, value=0.8):
    yy, xx = np.mgrid[:size, :size]
    img = np.zeros((3, size, size))
    img[:, (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = value
    return img


def bbox_scan(image, threshold):
    rows, cols = [], []
    for i in range(image.shape[1]):
        for j in range(image.shape[2]):
            if max(image[c, i, j] for c in range(image.shape[0])) > threshold:
                rows.append(i)
                cols.append(j)
    return min(rows), max(rows) + 1, min(cols), max(cols) + 1


def test_black_image_unchanged():
    x = np.zeros((3, 20, 20))
    assert P.crop_to_content(x) is x


def test_disc_crop_matches_scan():
    x = disc_image()
    top, bottom, left, right = bbox_scan(x, 7 / 255)
    y = P.crop_to_content(x)
    assert np.array_equal(y, x[:, top:bottom, left:right])
    assert y.shape == (3, 29, 29)


def test_tight_image_unchanged_and_idempotent():
    x = disc_image()
    once = P.crop_to_content(x)
    assert np.array_equal(P.crop_to_content(once), once)
    full = np.full((3, 10, 12), 0.5)
    assert np.array_equal(P.crop_to_content(full), full)


def test_degenerate_box_falls_back():
    x = np.zeros((3, 32, 32))
    x[:, 10:14, 10:30] = 1.0  # 4 rows high
    assert P.crop_to_content(x) is x


def test_resize_identity_and_constant():
    x = np.random.default_rng(0).random((3, 17, 23))
    assert np.max(np.abs(P.resize(x, (17, 23)) - x)) < 1e-6
    c = np.full((3, 10, 10), 0.37)
    assert np.allclose(P.resize(c, (23, 7)), 0.37, atol=1e-15)


def test_checkerboard_downscale_matches_block_average():
    yy, xx = np.mgrid[:16, :16]
    board = ((yy + xx) % 2).astype(float)
    x = np.stack([board, 1 - board, board * 0.5])
    ref = x.reshape(3, 8, 2, 8, 2).mean(axis=(2, 4))
    assert np.max(np.abs(P.resize(x, (8, 8)) - ref)) < 1e-6


def test_resize_rejects_tiny_target():
    with pytest.raises(ValueError):
        P.resize(np.zeros((3, 8, 8)), (1, 4))


def test_config_validation():
    with pytest.raises(ValueError):
        P.PreprocessConfig(crop_threshold=1.0)
    with pytest.raises(ValueError):
        P.PreprocessConfig(target_size=(4, 64))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(8, 40), st.integers(8, 40))
def test_pipeline_range_and_idempotent_crop(seed, h, w):
    rng = np.random.default_rng(seed)
    x = rng.random((3, h, w)) * (rng.random((1, h, w)) > 0.3)
    once = P.crop_to_content(x)
    assert np.array_equal(P.crop_to_content(once), once)
    y = P.preprocess(x, P.PreprocessConfig(target_size=(16, 16)))
    assert y.shape == (3, 16, 16)
    assert np.all(np.isfinite(y)) and y.min() >= 0 and y.max() <= 1

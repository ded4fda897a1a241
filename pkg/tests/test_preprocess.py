import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from opseg.preprocess import (
    AffineParams,
    Volume,
    augment_pair,
    clahe,
    gaussian_blur,
    gaussian_kernel,
    hist_equalize,
    median_blur,
    preprocess_image,
    random_affine,
    remove_boundary_slices,
    warp_pair,
)

images = arrays(np.float64, st.tuples(st.integers(8, 24), st.integers(8, 24)), elements=st.floats(0, 1))


def vol(s):
    slices = [np.full((4, 4), i / 20) for i in range(s)]
    masks = [np.full((4, 4), i % 10, dtype=np.uint8) for i in range(s)]
    return Volume("subj", "scan", "T2", slices, masks)


def test_slice_removal():
    out = remove_boundary_slices(vol(15), 0.2)
    assert len(out.slices) == 9
    assert [s[0, 0] for s in out.slices] == [i / 20 for i in range(3, 12)]
    assert [m[0, 0] for m in out.masks] == [i % 10 for i in range(3, 12)]
    assert (out.subject_id, out.scanner_id, out.modality) == ("subj", "scan", "T2")
    assert len(remove_boundary_slices(vol(7), 0.0).slices) == 7
    assert len(remove_boundary_slices(vol(2), 0.4).slices) == 2


def test_slice_removal_errors():
    with pytest.raises(ValueError):
        remove_boundary_slices(vol(4), 0.5)
    with pytest.raises(ValueError):
        Volume("s", "x", "T2", [np.zeros((2, 2))], [])


def test_blur_constant_and_impulse():
    np.testing.assert_allclose(gaussian_blur(np.full((16, 16), 0.37)), 0.37, atol=1e-12)
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    sigma = 1.3
    r = math.ceil(3 * sigma)
    z = sum(math.exp(-t * t / (2 * sigma * sigma)) for t in range(-r, r + 1))
    stencil = np.array([math.exp(-t * t / (2 * sigma * sigma)) / z for t in range(-r, r + 1)])
    out = gaussian_blur(img, sigma)
    np.testing.assert_allclose(out[10 - r:11 + r, 10 - r:11 + r], np.outer(stencil, stencil), atol=1e-15)
    assert out[10 - r - 1].max() == 0
    np.testing.assert_allclose(gaussian_kernel(sigma), stencil, atol=1e-15)


def test_blur_preserves_total_intensity(rng):
    img = rng.uniform(0, 1, (32, 27))
    total = math.fsum(img.ravel())
    assert abs(math.fsum(gaussian_blur(img, 0.8).ravel()) - total) < 1e-9


def test_blur_rejects_bad_sigma():
    with pytest.raises(ValueError):
        gaussian_blur(np.zeros((8, 8)), 0.0)


def test_median(rng):
    np.testing.assert_array_equal(median_blur(np.full((6, 6), 0.2)), 0.2)
    flat = np.full((7, 7), 0.1)
    flat[3, 3] = 1.0
    np.testing.assert_array_equal(median_blur(flat, 3), 0.1)
    with pytest.raises(ValueError):
        median_blur(flat, 4)
    img = rng.uniform(0, 1, (5, 5))
    pad = np.pad(img, 1, mode="symmetric")
    oracle = np.array([[sorted(pad[y:y + 3, x:x + 3].ravel())[4] for x in range(5)] for y in range(5)])
    np.testing.assert_array_equal(median_blur(img, 3), oracle)


def test_hist_equalize_two_levels():
    img = np.full((4, 4), 0.2)
    img[:, 2:] = 0.8
    out = hist_equalize(img)
    assert set(np.unique(out)) == {0.5, 1.0}
    assert np.all(out[:, :2] == 0.5)


def test_hist_equalize_uniform_near_identity():
    img = ((np.arange(256) + 0.5) / 256).reshape(16, 16)
    assert np.max(np.abs(hist_equalize(img) - img)) <= 1 / 256


def scalar_clahe(img, tiles, clip, bins=256):
    """Pixel-by-pixel reference: each output value is computed independently."""
    h, w = img.shape
    q = np.minimum((img * bins).astype(int), bins - 1)
    ye = [round(i * h / tiles) for i in range(tiles + 1)]
    xe = [round(i * w / tiles) for i in range(tiles + 1)]

    def lut(ty, tx, v):
        tile = q[ye[ty]:ye[ty + 1], xe[tx]:xe[tx + 1]].ravel()
        hist = [0.0] * bins
        for t in tile:
            hist[t] += 1
        if sum(1 for c in hist if c) <= 1:
            return (v + 0.5) / bins
        if math.isfinite(clip):
            limit = clip * len(tile) / bins
            excess = sum(max(c - limit, 0) for c in hist)
            hist = [min(c, limit) + excess / bins for c in hist]
        return sum(hist[:v + 1]) / sum(hist)

    def centre(edges, i):
        return (edges[i] + edges[i + 1] - 1) / 2

    def interp(edges, p):
        cs = [centre(edges, i) for i in range(tiles)]
        if p <= cs[0]:
            return 0, 0, 0.0
        if p >= cs[-1]:
            return tiles - 1, tiles - 1, 0.0
        i = max(j for j in range(tiles) if cs[j] <= p)
        return i, i + 1, (p - cs[i]) / (cs[i + 1] - cs[i])

    out = np.zeros_like(img)
    for y in range(h):
        y0, y1, wy = interp(ye, y)
        for x in range(w):
            x0, x1, wx = interp(xe, x)
            v = q[y, x]
            top = (1 - wx) * lut(y0, x0, v) + wx * lut(y0, x1, v)
            bot = (1 - wx) * lut(y1, x0, v) + wx * lut(y1, x1, v)
            out[y, x] = (1 - wy) * top + wy * bot
    return out


def test_clahe_matches_scalar_reference(rng):
    img = rng.uniform(0.3, 0.7, (17, 13)) ** 2
    np.testing.assert_allclose(clahe(img, tiles=3, clip_limit=2.0), scalar_clahe(img, 3, 2.0), atol=1e-12)


def test_clahe_constant_image():
    out = clahe(np.full((32, 32), 0.42))
    assert np.max(np.abs(out - 0.42)) <= 1 / 256


def test_clahe_widens_low_contrast_ramp():
    ramp = np.tile(np.linspace(0.4, 0.6, 64), (64, 1))
    out = clahe(ramp)
    assert out.max() - out.min() > ramp.max() - ramp.min()


def test_clahe_rejects_small_image_and_bad_params():
    with pytest.raises(ValueError):
        clahe(np.zeros((4, 4)), tiles=8)
    with pytest.raises(ValueError):
        clahe(np.zeros((16, 16)), clip_limit=0.5)


@given(images)
def test_clahe_one_tile_unclipped_is_global_equalization(img):
    diff = np.abs(clahe(img, tiles=1, clip_limit=math.inf) - hist_equalize(img))
    assert diff.max() <= 1 / 256


@given(images, st.floats(0.3, 2.0))
def test_ops_stay_in_unit_range(img, sigma):
    for out in (gaussian_blur(img, min(sigma, 2.0)) if 3 * sigma < min(img.shape) else img,
                median_blur(img), hist_equalize(img), clahe(img, tiles=2)):
        assert out.min() >= 0 and out.max() <= 1


def test_preprocess_image_range(rng):
    out = preprocess_image(rng.uniform(0, 1, (64, 64)))
    assert out.shape == (64, 64) and 0 <= out.min() and out.max() <= 1


def test_affine_params_ranges():
    with pytest.raises(ValueError):
        AffineParams(rotate_deg=16)
    with pytest.raises(ValueError):
        AffineParams(translate_frac=(0.2, 0.0))
    with pytest.raises(ValueError):
        AffineParams(shear_frac=(0.0, -0.11))
    p = random_affine(np.random.default_rng(0))
    assert abs(p.rotate_deg) <= 15


def test_identity_augmentation_bit_identical(rng):
    img = rng.uniform(0, 1, (16, 16))
    mask = rng.integers(0, 10, (16, 16)).astype(np.uint8)
    a, b = augment_pair(img, mask, AffineParams())
    np.testing.assert_array_equal(a, img)
    np.testing.assert_array_equal(b, mask)


def test_rotation_90_permutes_pixels(rng):
    mask = rng.integers(0, 10, (15, 15)).astype(np.uint8)
    img = rng.uniform(0, 1, (15, 15))
    out_img, out = warp_pair(img, mask, 90.0)
    assert np.bincount(out.ravel(), minlength=10).tolist() == np.bincount(mask.ravel(), minlength=10).tolist()
    assert sorted(out_img.ravel()) == pytest.approx(sorted(img.ravel()), abs=1e-12)
    # image and mask moved together
    for cls in range(10):
        np.testing.assert_allclose(np.sort(out_img[out == cls]), np.sort(img[mask == cls]), atol=1e-12)


def test_integer_translation_keeps_classes(rng):
    mask = np.zeros((20, 20), dtype=np.uint8)
    mask[5:12, 6:10] = rng.integers(1, 10, (7, 4))
    img = mask / 10.0
    # 0.1 * 20 = 2 pixels right, 0.05 * 20 = 1 pixel down
    _, out = augment_pair(img, mask, AffineParams(translate_frac=(0.1, 0.05)))
    np.testing.assert_array_equal(out[6:13, 8:12], mask[5:12, 6:10])
    assert np.count_nonzero(out) == np.count_nonzero(mask)


def test_translation_moves_centroid():
    img = np.zeros((40, 40))
    yy, xx = np.mgrid[0:40, 0:40]
    blob = (yy - 19.5) ** 2 + (xx - 19.5) ** 2 < 36
    img[blob] = 1.0
    mask = blob.astype(np.uint8)
    out, out_mask = augment_pair(img, mask, AffineParams(translate_frac=(0.05, 0.0)))

    def cx(a):
        return (a * xx).sum() / a.sum()

    assert abs(cx(out) - cx(img) - 0.05 * 40) <= 1
    assert abs(cx(out_mask) - cx(mask) - 0.05 * 40) <= 1


def test_augmentation_out_of_frame_is_background(rng):
    img = np.ones((16, 16))
    mask = np.full((16, 16), 3, dtype=np.uint8)
    out, m = augment_pair(img, mask, AffineParams(translate_frac=(0.1, 0.1), rotate_deg=10))
    assert m[0, 0] == 0 and out[0, 0] == 0
    assert set(np.unique(m)) <= {0, 3}

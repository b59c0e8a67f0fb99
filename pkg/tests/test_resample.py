import numpy as np

from mscope.resample import (bicubic_resize, bilinear_sample, gaussian_blur)


def test_bilinear_at_pixel_centers_is_exact():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (9, 11))
    ys, xs = np.meshgrid(np.arange(9.0), np.arange(11.0), indexing="ij")
    np.testing.assert_allclose(bilinear_sample(img, ys, xs), img, atol=1e-12)


def test_bilinear_midpoint_average():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    v = bilinear_sample(img, np.array([0.5]), np.array([0.5]))
    np.testing.assert_allclose(v, [1.5])


def test_bicubic_same_size_identity():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (7, 5))
    np.testing.assert_array_equal(bicubic_resize(img, 7, 5), img)


def test_bicubic_preserves_constants():
    img = np.full((10, 12), 3.7)
    out = bicubic_resize(img, 17, 9)
    np.testing.assert_allclose(out, 3.7, atol=1e-9)


def test_bicubic_preserves_linear_ramp_interior():
    yy = np.linspace(0, 1, 32)[:, None] * np.ones((1, 24))
    out = bicubic_resize(yy, 16, 12)
    ref = np.linspace(0, 1, 32)
    # cubic convolution reproduces affine functions away from the borders
    expected = (np.arange(16) + 0.5) * 2 - 0.5
    interior = slice(2, 14)
    np.testing.assert_allclose(out[interior, 5],
                               ref[0] + (ref[1] - ref[0]) *
                               expected[interior], atol=1e-6)


def test_blur_preserves_mean_and_smooths():
    rng = np.random.default_rng(2)
    img = rng.standard_normal((64, 64))
    out = gaussian_blur(img, 2.0)
    assert abs(out.mean() - img.mean()) < 0.02
    assert out.var() < img.var() * 0.2


def test_blur_zero_sigma_is_copy():
    img = np.random.default_rng(3).standard_normal((8, 8))
    np.testing.assert_array_equal(gaussian_blur(img, 0.0), img)

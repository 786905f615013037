import numpy as np
import pytest

from metrics import PSNR_CAP, metrics_psnr_ssim, psnr


def test_psnr_of_identical_images_is_capped(rng):
    image = rng.uniform(size=(6, 6, 3))
    assert psnr(image, image) == PSNR_CAP


def test_psnr_of_known_error():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)
    assert psnr(a, b) == pytest.approx(20.0)


def test_metrics_of_identical_images(rng):
    image = rng.uniform(size=(16, 16, 3))
    value_psnr, value_ssim = metrics_psnr_ssim(image, image)
    assert value_psnr == PSNR_CAP
    assert value_ssim == pytest.approx(1.0)


def test_ssim_drops_with_noise(rng):
    image = rng.uniform(size=(16, 16, 3))
    noisy = np.clip(image + rng.normal(scale=0.2, size=image.shape), 0.0, 1.0)
    value_psnr, value_ssim = metrics_psnr_ssim(noisy, image)
    assert value_psnr < 20.0
    assert value_ssim < 0.95


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        metrics_psnr_ssim(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

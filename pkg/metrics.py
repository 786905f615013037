import numpy as np

from utils.image_utils import ssim_with_grad

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR over the [0, 1] range, capped at 99 dB for identical images."""
    mse = float(np.mean((np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(-10.0 * np.log10(mse))


def metrics_psnr_ssim(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """
    Image quality of `a` against reference `b`.

    Returns:
        tuple[float, float]: (PSNR in dB, mean windowed SSIM) using the loss's SSIM definition.

    Raises:
        ValueError: If the shapes differ.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"Image shape mismatch: {a.shape} vs {b.shape}")
    ssim, _ = ssim_with_grad(a, b)
    return psnr(a, b), ssim

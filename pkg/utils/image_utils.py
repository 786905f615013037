import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=float) - size // 2
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def window_filter(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """
    Separable zero-padded filtering over the two spatial axes of an (H, W, C) image.
    The kernel is symmetric, so this operator is its own adjoint.
    """
    out = correlate1d(image, kernel, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, kernel, axis=1, mode="constant", cval=0.0)


def ssim_with_grad(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> tuple[float, np.ndarray]:
    """
    Mean windowed SSIM between two images and its gradient with respect to the first.

    Args:
        x (np.ndarray): Image of shape (H, W, C); the gradient is taken with respect to it.
        y (np.ndarray): Reference image of the same shape.
        data_range (float): Dynamic range of the pixel values.

    Returns:
        tuple[float, np.ndarray]: Mean SSIM over pixels and channels, and dSSIM/dx.
    """
    kernel = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    mu_x = window_filter(x, kernel)
    mu_y = window_filter(y, kernel)
    sigma_x = window_filter(x * x, kernel) - mu_x ** 2
    sigma_y = window_filter(y * y, kernel) - mu_y ** 2
    sigma_xy = window_filter(x * y, kernel) - mu_x * mu_y

    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * sigma_xy + c2
    b1 = mu_x ** 2 + mu_y ** 2 + c1
    b2 = sigma_x + sigma_y + c2
    ssim_map = (a1 * a2) / (b1 * b2)

    count = ssim_map.size
    # grouped so the gradient vanishes exactly when x == y
    d_mu_x = 2.0 * (mu_y * (a2 - a1) - mu_x * ssim_map * (b2 - b1)) / (b1 * b2) / count
    d_xx = -ssim_map / b2 / count
    d_xy = 2.0 * (a1 / b1) / b2 / count

    grad = (window_filter(d_mu_x, kernel)
            + 2.0 * x * window_filter(d_xx, kernel)
            + y * window_filter(d_xy, kernel))
    return float(ssim_map.mean()), grad

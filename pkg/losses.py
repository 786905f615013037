from typing import Optional

import numpy as np

from cameras import CameraModel, camera_rays
from utils.image_utils import ssim_with_grad


def loss_rgb(render: np.ndarray, gt: np.ndarray, l1_weight: float = 0.8, ssim_weight: float = 0.2) -> tuple[float, np.ndarray]:
    """
    Photometric loss l1_weight * L1 + ssim_weight * (1 - SSIM) / 2 with its analytic gradient.

    Args:
        render (np.ndarray): Rendered image (H, W, 3).
        gt (np.ndarray): Target image of the same shape.
        l1_weight (float): Weight of the mean absolute error.
        ssim_weight (float): Weight of the D-SSIM term.

    Returns:
        tuple[float, np.ndarray]: Loss value and dL/d(render).

    Raises:
        ValueError: If the shapes differ.
    """
    render = np.asarray(render, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if render.shape != gt.shape:
        raise ValueError(f"Image shape mismatch: render {render.shape} vs target {gt.shape}")
    diff = render - gt
    l1 = float(np.abs(diff).mean())
    ssim, d_ssim = ssim_with_grad(render, gt)
    loss = l1_weight * l1 + ssim_weight * (1.0 - ssim) / 2.0
    grad = l1_weight * np.sign(diff) / diff.size - ssim_weight * d_ssim / 2.0
    return loss, grad


def _back_project(depth: np.ndarray, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    return origins + depth[..., None] * directions


def _depth_normals(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Interior central differences and their (unnormalized) cross product."""
    vertical = np.zeros_like(points)
    horizontal = np.zeros_like(points)
    vertical[1:-1, :] = 0.5 * (points[2:, :] - points[:-2, :])
    horizontal[:, 1:-1] = 0.5 * (points[:, 2:] - points[:, :-2])
    cross = np.cross(vertical, horizontal)
    norm = np.linalg.norm(cross, axis=-1)
    return vertical, horizontal, cross, norm


def _interior_mask(shape: tuple[int, int], mask: Optional[np.ndarray]) -> np.ndarray:
    height, width = shape
    valid = np.zeros((height, width), dtype=bool)
    valid[1:-1, 1:-1] = True
    if mask is None:
        return valid
    mask = np.asarray(mask, dtype=bool)
    neighbours = mask.copy()
    neighbours[1:-1, 1:-1] &= mask[2:, 1:-1] & mask[:-2, 1:-1] & mask[1:-1, 2:] & mask[1:-1, :-2]
    return valid & neighbours


def depth_to_normal(depth: np.ndarray, camera: CameraModel, mask: Optional[np.ndarray] = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """
    Normals from finite differences of the back-projected depth map.

    Args:
        depth (np.ndarray): (H, W) depth along each pixel's unit ray.
        camera (CameraModel): Camera the depth map was rendered from.
        mask (np.ndarray, optional): (H, W) pixels with valid depth.

    Returns:
        tuple[np.ndarray, np.ndarray]: (H, W, 3) camera-facing world normals and the (H, W)
        validity mask (interior pixels whose four neighbours are valid).
    """
    origins, directions = camera_rays(camera)
    shape = camera.shape
    points = _back_project(np.asarray(depth, dtype=float), origins.reshape(shape + (3,)), directions.reshape(shape + (3,)))
    _, _, cross, norm = _depth_normals(points)
    valid = _interior_mask(shape, mask) & (norm > 0)
    normals = np.zeros_like(cross)
    normals[valid] = cross[valid] / norm[valid, None]
    return normals, valid


def loss_normal_consistency(n_map: np.ndarray, depth_map: np.ndarray, camera: CameraModel,
                            mask: Optional[np.ndarray] = None) -> tuple[float, np.ndarray, np.ndarray]:
    """
    Mean (1 - n . N_d) over valid pixels, where N_d comes from depth_to_normal.

    Args:
        n_map (np.ndarray): (H, W, 3) rendered unit normals.
        depth_map (np.ndarray): (H, W) rendered depth.
        camera (CameraModel): Camera of the render.
        mask (np.ndarray, optional): (H, W) pixels above the alpha floor.

    Returns:
        tuple[float, np.ndarray, np.ndarray]: Loss, dL/d(n_map), dL/d(depth_map).
    """
    n_map = np.asarray(n_map, dtype=float)
    depth_map = np.asarray(depth_map, dtype=float)
    shape = camera.shape
    origins, directions = camera_rays(camera)
    directions = directions.reshape(shape + (3,))
    points = _back_project(depth_map, origins.reshape(shape + (3,)), directions)
    vertical, horizontal, cross, norm = _depth_normals(points)
    valid = _interior_mask(shape, mask) & (norm > 0) & np.any(n_map != 0.0, axis=-1)

    grad_n = np.zeros_like(n_map)
    grad_depth = np.zeros_like(depth_map)
    count = int(valid.sum())
    if count == 0:
        return 0.0, grad_n, grad_depth

    depth_normals = np.zeros_like(cross)
    depth_normals[valid] = cross[valid] / norm[valid, None]
    cosine = np.sum(n_map * depth_normals, axis=-1)
    loss = float(np.sum(1.0 - cosine[valid]) / count)

    grad_n[valid] = -depth_normals[valid] / count
    g_unit = np.zeros_like(cross)
    g_unit[valid] = -n_map[valid] / count
    radial = np.sum(g_unit * depth_normals, axis=-1, keepdims=True)
    g_cross = np.zeros_like(cross)
    g_cross[valid] = (g_unit - radial * depth_normals)[valid] / norm[valid, None]
    g_vertical = np.cross(horizontal, g_cross)
    g_horizontal = np.cross(g_cross, vertical)

    g_points = np.zeros_like(points)
    g_points[2:, :] += 0.5 * g_vertical[1:-1, :]
    g_points[:-2, :] -= 0.5 * g_vertical[1:-1, :]
    g_points[:, 2:] += 0.5 * g_horizontal[:, 1:-1]
    g_points[:, :-2] -= 0.5 * g_horizontal[:, 1:-1]
    grad_depth = np.sum(g_points * directions, axis=-1)
    return loss, grad_n, grad_depth


def loss_mono_normal(n_map: np.ndarray, mono_map: np.ndarray, mask: Optional[np.ndarray] = None
                     ) -> tuple[float, np.ndarray]:
    """
    Mean (1 - n . N_m) over valid pixels.

    Args:
        n_map (np.ndarray): (H, W, 3) rendered unit normals.
        mono_map (np.ndarray): (H, W, 3) unit monocular normals in the same frame.
        mask (np.ndarray, optional): (H, W) validity; defaults to pixels with a nonzero mono normal.

    Returns:
        tuple[float, np.ndarray]: Loss and dL/d(n_map).
    """
    n_map = np.asarray(n_map, dtype=float)
    mono_map = np.asarray(mono_map, dtype=float)
    if n_map.shape != mono_map.shape:
        raise ValueError(f"Normal map shape mismatch: {n_map.shape} vs {mono_map.shape}")
    valid = np.any(mono_map != 0.0, axis=-1)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    grad = np.zeros_like(n_map)
    count = int(valid.sum())
    if count == 0:
        return 0.0, grad
    loss = float(np.sum(1.0 - np.sum(n_map * mono_map, axis=-1)[valid]) / count)
    grad[valid] = -mono_map[valid] / count
    return loss, grad

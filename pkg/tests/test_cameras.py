import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cameras import (
    CameraModel, camera_extent, camera_rays, generate_camera_rays, load_cameras, look_at, orthonormality_error,
    save_cameras,
)
from errors import DataError, FormatError


def test_look_at_frame():
    camera = look_at((0.0, 0.0, -2.0), (0.0, 0.0, 0.0), width=8, height=6, fov_degrees=90.0)
    assert_allclose(camera.center, [0.0, 0.0, -2.0])
    assert_allclose(camera.rotation @ np.zeros(3) + camera.translation, [0.0, 0.0, 2.0])
    # world -y is image up
    assert (camera.rotation @ np.array([0.0, 1.0, 0.0]))[1] > 0
    assert camera.fx == pytest.approx(4.0)
    assert camera.shape == (6, 8)
    assert orthonormality_error(camera.rotation) < 1e-12


def test_look_at_rejects_parallel_up():
    with pytest.raises(ValueError):
        look_at((0.0, 0.0, 0.0), (0.0, 1.0, 0.0))


def test_camera_model_validation():
    with pytest.raises(ValueError, match="Focal"):
        CameraModel(4, 4, 0.0, 1.0, 2.0, 2.0, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError, match="size"):
        CameraModel(0, 4, 1.0, 1.0, 2.0, 2.0, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError, match="orthonormal"):
        CameraModel(4, 4, 1.0, 1.0, 2.0, 2.0, 1.5 * np.eye(3), np.zeros(3))


def test_camera_rays_match_single_pixel_rays():
    camera = look_at((0.3, -0.2, -2.0), (0.0, 0.1, 0.0), width=5, height=3, fov_degrees=50.0)
    origins, directions = camera_rays(camera)
    assert origins.shape == directions.shape == (15, 3)
    assert_allclose(np.linalg.norm(directions, axis=1), 1.0)
    for row in range(3):
        for col in range(5):
            ray = generate_camera_rays(camera, (col + 0.5, row + 0.5))
            assert_allclose(ray.origin, origins[row * 5 + col])
            assert_allclose(ray.direction, directions[row * 5 + col], atol=1e-12)


def test_principal_ray_points_at_target():
    camera = look_at((1.0, 2.0, 3.0), (0.0, 0.0, 0.0), width=4, height=4)
    ray = generate_camera_rays(camera, (camera.cx, camera.cy))
    assert_allclose(ray.direction, -np.array([1.0, 2.0, 3.0]) / np.sqrt(14.0), atol=1e-12)


def test_cameras_round_trip(tmp_path):
    cameras = [look_at((np.cos(a), 0.2, np.sin(a)), (0.0, 0.0, 0.0), width=6, height=4) for a in (0.0, 1.0, 2.5)]
    path = str(tmp_path / "cameras.json")
    save_cameras(path, cameras)
    assert load_cameras(path) == cameras


def write_cameras(path, cameras):
    with open(path, "w") as f:
        json.dump({"cameras": cameras}, f)
    return str(path)


def record(rotation=None, **fields):
    matrix = np.eye(4)
    if rotation is not None:
        matrix[:3, :3] = rotation
    values = dict(width=4, height=4, fx=2.0, fy=2.0, cx=2.0, cy=2.0, world_to_camera=matrix.tolist())
    values.update(fields)
    return values


def test_non_orthonormal_rotation_names_camera(tmp_path):
    path = write_cameras(tmp_path / "cameras.json", [record(), record(1.1 * np.eye(3))])
    with pytest.raises(FormatError, match="camera 1: rotation is not orthonormal"):
        load_cameras(path)


def test_near_orthonormal_rotation_is_projected(tmp_path):
    rotation = np.eye(3)
    rotation[0, 1] = 2e-4
    path = write_cameras(tmp_path / "cameras.json", [record(rotation)])
    (camera,) = load_cameras(path)
    assert orthonormality_error(camera.rotation) < 1e-12
    assert_allclose(camera.rotation, np.eye(3), atol=1e-3)


def test_invalid_camera_records(tmp_path):
    with pytest.raises(FormatError, match="camera 0"):
        load_cameras(write_cameras(tmp_path / "a.json", [record(fx=-1.0)]))
    with pytest.raises(FormatError, match="camera 0"):
        load_cameras(write_cameras(tmp_path / "b.json", [record(world_to_camera=[[1.0, 0.0, 0.0]])]))
    bad = tmp_path / "c.json"
    bad.write_text("{")
    with pytest.raises(FormatError, match="invalid JSON"):
        load_cameras(str(bad))
    with pytest.raises(FileNotFoundError):
        load_cameras(str(tmp_path / "missing.json"))


def test_camera_extent():
    left = look_at((-1.0, 0.0, 0.0), (0.0, 0.0, 5.0))
    right = look_at((1.0, 0.0, 0.0), (0.0, 0.0, 5.0))
    assert camera_extent([left, right]) == pytest.approx(1.1)
    assert camera_extent([left]) == 1.0
    with pytest.raises(DataError):
        camera_extent([])

import json
import os
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import DataError, FormatError
from tracer import Ray

ORTHONORMAL_TOLERANCE = 1e-3


@dataclass(frozen=True)
class CameraModel:
    """
    Pinhole camera. Camera frame: +z forward, y down, x right.

    Attributes:
        width (int): Image width in pixels.
        height (int): Image height in pixels.
        fx, fy (float): Focal lengths in pixels.
        cx, cy (float): Principal point in pixels.
        rotation (np.ndarray): World-to-camera rotation, shape (3, 3).
        translation (np.ndarray): World-to-camera translation, shape (3,).
    """
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"Image size must be positive, got {self.width}x{self.height}")
        error = orthonormality_error(self.rotation)
        if error > ORTHONORMAL_TOLERANCE:
            raise ValueError(f"Camera rotation is not orthonormal (deviation {error:.2e})")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def __eq__(self, other) -> bool:
        if not isinstance(other, CameraModel):
            return NotImplemented
        return ((self.width, self.height, self.fx, self.fy, self.cx, self.cy)
                == (other.width, other.height, other.fx, other.fy, other.cx, other.cy)
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def world_to_camera_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix


def orthonormality_error(rotation: np.ndarray) -> float:
    rotation = np.asarray(rotation, dtype=float)
    return float(np.max(np.abs(rotation @ rotation.T - np.eye(3))))


def look_at(eye, target, up=(0.0, -1.0, 0.0), width: int = 64, height: int = 64,
            fov_degrees: float = 60.0) -> CameraModel:
    """
    Builds a camera at `eye` looking at `target`.

    Args:
        eye: Camera center in world space.
        target: Point the optical axis passes through.
        up: World direction that should appear up in the image (image y points down).
        width (int): Image width.
        height (int): Image height.
        fov_degrees (float): Horizontal field of view.

    Returns:
        CameraModel: Camera with principal point at the image center.
    """
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("look_at up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    focal = 0.5 * width / np.tan(np.radians(fov_degrees) / 2.0)
    return CameraModel(
        width=width, height=height, fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
        rotation=rotation, translation=-rotation @ eye,
    )


def generate_camera_rays(model: CameraModel, pixel: tuple[float, float]) -> Ray:
    """
    Ray through a pixel position, given in continuous pixel coordinates (px, py).
    Pixel (i, j) has its center at (i + 0.5, j + 0.5).
    """
    px, py = pixel
    direction_cam = np.array([(px - model.cx) / model.fx, (py - model.cy) / model.fy, 1.0])
    return Ray.create(model.center, model.rotation.T @ direction_cam)


def camera_rays(model: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """
    Origins and unit directions for every pixel center, row-major.

    Returns:
        tuple[np.ndarray, np.ndarray]: Arrays of shape (height * width, 3).
    """
    cols, rows = np.meshgrid(np.arange(model.width) + 0.5, np.arange(model.height) + 0.5)
    direction_cam = np.stack([
        (cols - model.cx) / model.fx,
        (rows - model.cy) / model.fy,
        np.ones_like(cols),
    ], axis=-1).reshape(-1, 3)
    directions = direction_cam @ model.rotation
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    origins = np.broadcast_to(model.center, directions.shape).copy()
    return origins, directions


class CameraRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    width: int = Field(gt=0)
    height: int = Field(gt=0)
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    world_to_camera: list[list[float]] = Field(description="Row-major 4x4 (or 3x4) world-to-camera matrix")

    @field_validator("world_to_camera")
    @classmethod
    def validate_matrix(cls, v: list[list[float]]) -> list[list[float]]:
        if len(v) not in (3, 4) or any(len(row) != 4 for row in v):
            raise ValueError("world_to_camera must have 3 or 4 rows of 4 numbers")
        if len(v) == 4 and v[3] != [0.0, 0.0, 0.0, 1.0]:
            raise ValueError("world_to_camera bottom row must be [0, 0, 0, 1]")
        return v

    def to_model(self) -> CameraModel:
        matrix = np.asarray(self.world_to_camera, dtype=float)
        return CameraModel(
            width=self.width, height=self.height, fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
            rotation=matrix[:3, :3].copy(), translation=matrix[:3, 3].copy(),
        )

    @classmethod
    def from_model(cls, model: CameraModel) -> "CameraRecord":
        return cls(
            width=model.width, height=model.height, fx=float(model.fx), fy=float(model.fy),
            cx=float(model.cx), cy=float(model.cy),
            world_to_camera=[[float(c) for c in row] for row in model.world_to_camera_matrix()],
        )


def _orthonormalize(rotation: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rotation)
    return u @ vt


def load_cameras(path: str) -> list[CameraModel]:
    """
    Loads the cameras JSON file: {"cameras": [record, ...]}.

    Rotations off by less than the load tolerance but more than 1e-6 are projected back
    onto the nearest rotation.

    Raises:
        FileNotFoundError: If the file does not exist.
        FormatError: On malformed JSON, invalid records, or a non-orthonormal rotation
            (the message names the camera index).
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Camera file not found: {path}")
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid JSON: {e.msg}", path, e.pos) from e
    if not isinstance(payload, dict) or not isinstance(payload.get("cameras"), list):
        raise FormatError("expected an object with a 'cameras' list", path)

    models = []
    for index, raw in enumerate(payload["cameras"]):
        try:
            record = CameraRecord.model_validate(raw)
        except ValidationError as e:
            raise FormatError(f"camera {index}: {e.errors()[0]['msg']}", path) from e
        matrix = np.asarray(record.world_to_camera, dtype=float)
        error = orthonormality_error(matrix[:3, :3])
        if error > ORTHONORMAL_TOLERANCE:
            raise FormatError(f"camera {index}: rotation is not orthonormal (deviation {error:.2e})", path)
        model = record.to_model()
        if error > 1e-6:
            model = CameraModel(
                width=model.width, height=model.height, fx=model.fx, fy=model.fy, cx=model.cx, cy=model.cy,
                rotation=_orthonormalize(model.rotation), translation=model.translation,
            )
        models.append(model)
    return models


def save_cameras(path: str, models: list[CameraModel]):
    payload = {"cameras": [CameraRecord.from_model(model).model_dump() for model in models]}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)


def camera_extent(models: list[CameraModel]) -> float:
    """1.1 times the largest camera distance from the camera centroid, or 1.0 for a single viewpoint."""
    if not models:
        raise DataError("No cameras to compute the scene extent from")
    centers = np.array([model.center for model in models])
    radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    return 1.1 * radius if radius > 1e-6 else 1.0

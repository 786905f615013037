from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

KIND = "loss"


class EdgeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scale: float = Field(1.0, gt=0)


def run(render: np.ndarray, gt: np.ndarray, config: dict) -> tuple[float, np.ndarray]:
    """
    L1 distance between horizontal and vertical image gradients, a cheap structure term
    usable in the extra-loss slot.

    Args:
        render (np.ndarray): Rendered image (H, W, 3).
        gt (np.ndarray): Target image (H, W, 3).
        config (dict): Hook configuration:
            - "scale" (float): Multiplier on the term.

    Returns:
        tuple[float, np.ndarray]: Loss value and dL/d(render).
    """
    scale = EdgeConfig(**config).scale
    diff = np.asarray(render, dtype=float) - np.asarray(gt, dtype=float)
    dx = diff[:, 1:] - diff[:, :-1]
    dy = diff[1:, :] - diff[:-1, :]
    count = dx.size + dy.size
    if count == 0:
        return 0.0, np.zeros_like(diff)
    loss = scale * (np.abs(dx).sum() + np.abs(dy).sum()) / count
    grad = np.zeros_like(diff)
    sx = scale * np.sign(dx) / count
    sy = scale * np.sign(dy) / count
    grad[:, 1:] += sx
    grad[:, :-1] -= sx
    grad[1:, :] += sy
    grad[:-1, :] -= sy
    return float(loss), grad


def validate_config(config: dict) -> Optional[list]:
    try:
        EdgeConfig(**config)
        return None
    except ValidationError as e:
        return e.errors()


def get_config_requirements() -> dict:
    return {
        "scale":
            {
                "description": "Multiplier on the image-gradient L1 term.",
                "mandatory": False,
                "type": float
            },
    }

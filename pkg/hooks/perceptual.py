from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

KIND = "loss"


class PerceptualConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")


def run(render: np.ndarray, gt: np.ndarray, config: dict) -> tuple[float, np.ndarray]:
    """
    Extra loss term slot for a feature-space perceptual loss. No network ships with the
    renderer, so this contributes nothing.

    Args:
        render (np.ndarray): Rendered image (H, W, 3).
        gt (np.ndarray): Target image (H, W, 3).
        config (dict): Hook configuration, no expected keys.

    Returns:
        tuple[float, np.ndarray]: Zero loss and a zero gradient.
    """
    return 0.0, np.zeros_like(render, dtype=float)


def validate_config(config: dict) -> Optional[list]:
    """
    Validates the hook-specific configuration against its expected schema.
    This function is required in all hook modules.

    Returns:
        None if the config is valid, or a list of Pydantic validation errors if invalid.
    """
    try:
        PerceptualConfig(**config)
        return None
    except ValidationError as e:
        return e.errors()


def get_config_requirements() -> dict:
    return {}

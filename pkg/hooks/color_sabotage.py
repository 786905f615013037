from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

KIND = "densify"


class ColorSabotageConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")


def run(base, env, grads, config: dict, rng: np.random.Generator) -> bool:
    """
    Densification-time hook for perturbing base colors of reflective surfels. No-op.

    Returns:
        bool: True if the base set was modified.
    """
    return False


def validate_config(config: dict) -> Optional[list]:
    try:
        ColorSabotageConfig(**config)
        return None
    except ValidationError as e:
        return e.errors()


def get_config_requirements() -> dict:
    return {}

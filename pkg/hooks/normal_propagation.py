from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

KIND = "densify"


class NormalPropagationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")


def run(base, env, grads, config: dict, rng: np.random.Generator) -> bool:
    """
    Densification-time hook for propagating normals between neighbouring base surfels.
    Ships as a no-op extension point.

    Args:
        base (GaussianSet): Base set; mutate in place and call touch() when changed.
        env (GaussianSet | None): Environment set.
        grads (GradStore): Accumulated statistics of the base set.
        config (dict): Hook configuration, no expected keys.
        rng (np.random.Generator): Training random generator.

    Returns:
        bool: True if the base set was modified.
    """
    return False


def validate_config(config: dict) -> Optional[list]:
    try:
        NormalPropagationConfig(**config)
        return None
    except ValidationError as e:
        return e.errors()


def get_config_requirements() -> dict:
    return {}

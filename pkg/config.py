import json
import os
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda_norm: float = Field(0.04, description="Weight of the depth/normal consistency loss")
    lambda_mono: float = Field(0.01, description="Weight of the monocular normal loss")
    lambda_extra: float = Field(0.01, description="Weight of the pluggable extra loss term")
    l1_weight: float = Field(0.8, description="Weight of L1 inside the RGB loss")
    ssim_weight: float = Field(0.2, description="Weight of D-SSIM inside the RGB loss")

    @field_validator("lambda_norm", "lambda_mono", "lambda_extra", "l1_weight", "ssim_weight")
    @classmethod
    def validate_weight(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"loss weights must be non-negative, got {v}")
        return v


class TrainSchedule(BaseModel):
    model_config = ConfigDict(extra="forbid")

    total_steps: int = Field(30000, gt=0, description="Total optimization steps")
    bootstrap_steps: int = Field(3000, ge=0, description="Base-only steps before the environment set joins")
    densify_from: int = Field(500, ge=0, description="First step of the densification window")
    densify_until: int = Field(15000, ge=0, description="Last step of the densification window")
    densify_interval: int = Field(100, gt=0, description="Steps between densification passes")
    densify_threshold: float = Field(2e-4, gt=0, description="Mean depth-scaled positional gradient that triggers densification")
    clone_scale_fraction: float = Field(0.01, gt=0, description="Surfels with max scale at or below this fraction of the scene extent are cloned, larger ones split")
    split_scale_divisor: float = Field(1.6, gt=1, description="Scale divisor applied to split children")
    prune_opacity: float = Field(0.005, gt=0, lt=1, description="Surfels below this opacity are pruned")
    opacity_reset_interval: int = Field(3000, gt=0, description="Steps between opacity resets inside the densification window")
    env_grid: int = Field(32, ge=1, description="Environment initialization grid resolution per axis")
    env_samples_per_cell: int = Field(5, ge=1, description="Environment surfels sampled per grid cell")
    env_bounds_quantile: float = Field(0.995, gt=0.5, lt=1, description="Upper quantile of sparse points bounding the environment grid")
    env_cap: int = Field(630000, ge=1, description="Maximum environment surfel count kept by pruning")
    env_init_opacity: float = Field(0.1, gt=0, lt=1, description="Initial environment surfel opacity")
    env_init_scale: float = Field(0.5, gt=0, description="Initial environment surfel scale as a fraction of the cell edge")
    lr_position: float = Field(1.6e-4, ge=0, description="Initial center learning rate (times scene extent)")
    lr_position_final: float = Field(1.6e-6, ge=0, description="Final center learning rate (times scene extent)")
    lr_sh_dc: float = Field(2.5e-3, ge=0, description="Learning rate of the DC SH coefficients")
    lr_sh_rest: float = Field(1.25e-4, ge=0, description="Learning rate of the higher-order SH coefficients")
    lr_opacity: float = Field(0.05, ge=0, description="Learning rate of raw opacity")
    lr_scaling: float = Field(5e-3, ge=0, description="Learning rate of log scales")
    lr_rotation: float = Field(1e-3, ge=0, description="Learning rate of rotation quaternions")
    lr_blend: float = Field(1e-2, ge=0, description="Learning rate of raw blend weights")
    checkpoint_interval: int = Field(1000, gt=0, description="Steps between checkpoints")

    @model_validator(mode="after")
    def validate_schedule(self) -> "TrainSchedule":
        if self.bootstrap_steps >= self.total_steps:
            raise ValueError(
                f"bootstrap_steps ({self.bootstrap_steps}) must be smaller than total_steps ({self.total_steps})")
        if self.densify_from > self.densify_until:
            raise ValueError(
                f"densify_from ({self.densify_from}) must not exceed densify_until ({self.densify_until})")
        return self


class TracingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(16, ge=1, description="Hit-buffer capacity per traversal chunk")
    termination: float = Field(1e-4, gt=0, lt=1, description="Transmittance below which a ray stops")
    alpha_floor: float = Field(0.01, ge=0, lt=1, description="Minimum accumulated alpha for spawning a reflected ray")
    blend_floor: float = Field(0.001, ge=0, lt=1, description="Minimum blend weight for spawning a reflected ray")
    reflection_offset: Optional[float] = Field(None, description="Reflected-ray origin offset; default 1e-4 of the base-set diagonal")
    threads: int = Field(1, ge=1, description="Worker processes for rendering and gradients")
    joint_optimization: bool = Field(True, description="Propagate reflected-ray gradients into base geometry")
    env_after_bootstrap: bool = Field(True, description="Enable the environment pass once bootstrap ends")

    @field_validator("reflection_offset")
    @classmethod
    def validate_offset(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and v < 0:
            raise ValueError(f"reflection_offset must be non-negative, got {v}")
        return v


class TrainConfig(LossConfig, TrainSchedule, TracingConfig):
    """
    Flat training configuration. Every field is a documented key of config.json.
    """
    model_config = ConfigDict(extra="forbid")

    scene: Optional[str] = Field(None, description="Path to the scene.json manifest")
    seed: int = Field(0, description="Random seed")
    extra_term_hook: str = Field("perceptual", description="Hook module providing the extra loss term")
    normal_propagation_hook: str = Field("normal_propagation", description="Hook module run on the base set at each densification")
    color_sabotage_hook: str = Field("color_sabotage", description="Hook module run on the base set at each densification")
    hook_config: dict[str, dict] = Field(default_factory=dict, description="Per-hook configuration, keyed by hook name")

    @field_validator("extra_term_hook", "normal_propagation_hook", "color_sabotage_hook")
    @classmethod
    def validate_hook(cls, v: str) -> str:
        # Check if file hooks/<name>.py exists
        file_path = os.path.join(os.path.dirname(os.path.abspath(__file__)), "hooks", v + ".py")
        if not os.path.isfile(file_path):
            raise ValueError(f"Invalid hook: {v} does not exist at {file_path}")
        return v


def config_keys() -> list[tuple[str, Any, str]]:
    """(key, default, description) for every accepted config key, in declaration order."""
    keys = []
    for name, info in TrainConfig.model_fields.items():
        default = info.get_default(call_default_factory=True)
        keys.append((name, default, info.description or ""))
    return keys


def parse_overrides(overrides: Optional[list[str]]) -> dict:
    """
    Parses `key=value` pairs; values are read as JSON where possible and as strings otherwise.

    Raises:
        ConfigError: If an override lacks '='.
    """
    parsed = {}
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"Override '{item}' is not of the form key=value")
        try:
            parsed[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            parsed[key.strip()] = value
    return parsed


def describe_validation_error(e: ValidationError) -> str:
    parts = []
    for error in e.errors():
        key = ".".join(str(loc) for loc in error["loc"]) or "config"
        parts.append(f"{key}: {error['msg']}")
    return "; ".join(parts)


def build_config(raw: dict, overrides: Optional[list[str]] = None) -> TrainConfig:
    """
    Validates a raw config dict merged with command-line overrides.

    Raises:
        ConfigError: Naming the offending key(s).
    """
    merged = dict(raw)
    merged.update(parse_overrides(overrides))
    try:
        cfg = TrainConfig(**merged)
    except ValidationError as e:
        raise ConfigError(describe_validation_error(e)) from e

    from hooks import validate_hooks
    errors = validate_hooks(cfg)
    if errors:
        raise ConfigError(f"Invalid hook config: {errors}")
    return cfg


def load_config(path: Optional[str], overrides: Optional[list[str]] = None) -> TrainConfig:
    """
    Loads and validates a flat JSON training config.

    Args:
        path (str, optional): Path to the config file; None starts from defaults.
        overrides (list[str], optional): `key=value` overrides applied before validation.

    Raises:
        ConfigError: If the file is missing, is not a JSON object, or fails validation.
    """
    raw = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, "r") as file:
                raw = json.load(file)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Malformed {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a single JSON object of key/value settings")
    return build_config(raw, overrides)


def save_config(path: str, cfg: TrainConfig):
    with open(path, "w") as file:
        json.dump(cfg.model_dump(), file, indent=2)

import csv
import json
import math
import os
import shutil
from dataclasses import dataclass, field
from types import ModuleType
from typing import Optional

import numpy as np
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from scipy.spatial import cKDTree

from cameras import CameraModel, camera_extent
from compose import ComposeOptions, GBufferGrads, backward_frame, compose_frame
from config import TrainConfig
from errors import DataError, NumericalError
from grad import GradStore
from hooks import load_hooks
from losses import loss_mono_normal, loss_normal_consistency, loss_rgb
from metrics import psnr
from primitives import SH_C0, SH_COEFFS, GaussianSet, make_set
from scene_io import SceneBundle, load_gaussians, save_gaussians
from tracer import TraceOptions
from utils.console_utils import console, log_info
from utils.math_utils import inverse_sigmoid, random_quaternions, sigmoid

INIT_NEIGHBOURS = 3
INIT_OPACITY = 0.1
INIT_BLEND = 0.1
MIN_INIT_SCALE = 1e-7
DEGENERATE_PAD = 1e-3
OPACITY_RESET_CEILING = 0.01

METRICS_SCHEMA = "#schema=metrics/v1"
METRICS_COLUMNS = ("step", "phase", "loss_total", "loss_rgb", "loss_norm", "loss_mono", "loss_extra",
                   "mono_skipped", "psnr", "n_base", "n_env", "clones", "splits", "pruned")
CHECKPOINT_DIR = "checkpoints"


class Adam:
    """
    First-order adaptive-moment optimizer over a dict of numpy parameter arrays.

    Each parameter keeps its own moments and step count, so a set that joins training late
    (the environment set after bootstrap) starts with fresh bias correction.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lrs: dict):
        """
        Updates every parameter in place.

        Args:
            params (dict): Name -> parameter array (updated in place).
            grads (dict): Name -> gradient of the same shape.
            lrs (dict): Name -> learning rate, a scalar or an array broadcastable to the parameter.
        """
        for name, param in params.items():
            g = grads[name]
            if name not in self.m or self.m[name].shape != param.shape:
                self.m[name] = np.zeros_like(param)
                self.v[name] = np.zeros_like(param)
                self.t[name] = 0
            self.t[name] += 1
            bc1 = 1.0 - self.beta1 ** self.t[name]
            bc2 = 1.0 - self.beta2 ** self.t[name]

            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * g
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (g * g)

            denom = np.sqrt(self.v[name] * (1.0 / bc2)) + self.epsilon
            param -= (np.asarray(lrs.get(name, 0.0)) / bc1) * self.m[name] / denom

    def remap(self, origin: np.ndarray):
        """Reindexes the moments after densification; rows with origin -1 start at zero."""
        kept = origin >= 0
        for moments in (self.m, self.v):
            for name, values in moments.items():
                out = np.zeros((len(origin),) + values.shape[1:])
                out[kept] = values[origin[kept]]
                moments[name] = out

    def reset(self, name: str):
        if name in self.m:
            self.m[name].fill(0.0)
            self.v[name].fill(0.0)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        arrays = {}
        for name in self.m:
            arrays[f"{prefix}.m.{name}"] = self.m[name]
            arrays[f"{prefix}.v.{name}"] = self.v[name]
        return arrays

    def load_state(self, arrays, prefix: str, steps: dict[str, int]):
        for name, count in steps.items():
            self.m[name] = np.array(arrays[f"{prefix}.m.{name}"])
            self.v[name] = np.array(arrays[f"{prefix}.v.{name}"])
            self.t[name] = int(count)


def position_lr(step: int, cfg: TrainConfig, extent: float) -> float:
    """Exponential decay from lr_position to lr_position_final over the run, scaled by the scene extent."""
    t = min(max(step / cfg.total_steps, 0.0), 1.0)
    if cfg.lr_position > 0 and cfg.lr_position_final > 0:
        lr = math.exp((1.0 - t) * math.log(cfg.lr_position) + t * math.log(cfg.lr_position_final))
    else:
        lr = (1.0 - t) * cfg.lr_position + t * cfg.lr_position_final
    return lr * extent


def learning_rates(cfg: TrainConfig, step: int, extent: float) -> dict:
    sh_lr = np.full((SH_COEFFS, 1), cfg.lr_sh_rest)
    sh_lr[0] = cfg.lr_sh_dc
    return {
        "centers": position_lr(step, cfg, extent),
        "rotations": cfg.lr_rotation,
        "log_scales": cfg.lr_scaling,
        "raw_opacity": cfg.lr_opacity,
        "sh_coeffs": sh_lr,
        "raw_blend": cfg.lr_blend,
    }


def init_base_set(points: np.ndarray, colors: Optional[np.ndarray] = None,
                  rng: Optional[np.random.Generator] = None) -> GaussianSet:
    """
    Base set seeded from a sparse point cloud.

    Each point becomes a surfel with an isotropic scale equal to the mean distance to its
    three nearest neighbours, a random orientation, opacity 0.1, blend weight 0.1 and a DC
    color taken from the point color (grey without colors).

    Raises:
        DataError: If the point cloud is empty.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    count = len(points)
    if count == 0:
        raise DataError("Cannot initialise a base set from an empty point cloud")
    if count > 1:
        k = min(INIT_NEIGHBOURS, count - 1)
        distances, _ = cKDTree(points).query(points, k=k + 1)
        mean_distance = distances[:, 1:].mean(axis=1)
    else:
        mean_distance = np.ones(1)
    scales = np.maximum(mean_distance, MIN_INIT_SCALE)

    sh_coeffs = np.zeros((count, SH_COEFFS, 3))
    if colors is not None:
        sh_coeffs[:, 0] = (np.asarray(colors, dtype=float).reshape(count, 3) - 0.5) / SH_C0
    return make_set("base", points, random_quaternions(rng, count), np.repeat(scales[:, None], 2, axis=1),
                    INIT_OPACITY, sh_coeffs, INIT_BLEND)


def init_env_set(points: np.ndarray, rng: Optional[np.random.Generator] = None, grid: int = 32,
                 per_cell: int = 5, quantile: float = 0.995, scale_fraction: float = 0.5,
                 opacity: float = 0.1) -> GaussianSet:
    """
    Environment set sampled uniformly over a grid spanning the robust bounds of the point cloud.

    Args:
        points (np.ndarray): (N, 3) sparse points.
        rng (np.random.Generator, optional): Source of positions and orientations.
        grid (int): Cells per axis.
        per_cell (int): Surfels sampled inside each cell.
        quantile (float): Upper per-axis quantile of the bounds; the lower one is 1 - quantile.
        scale_fraction (float): Surfel scale as a fraction of the mean cell edge.
        opacity (float): Initial opacity.

    Returns:
        GaussianSet: grid**3 * per_cell env surfels with zeroed SH.

    Behavior:
        - Axes with zero extent are inflated by 1e-3 of the largest extent (or by 1e-3 when
          every point coincides) so no scale degenerates.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise DataError("Cannot initialise an environment set from an empty point cloud")
    lo = np.quantile(points, 1.0 - quantile, axis=0)
    hi = np.quantile(points, quantile, axis=0)
    extent = hi - lo
    largest = float(extent.max())
    pad = DEGENERATE_PAD * largest if largest > 0 else DEGENERATE_PAD
    flat = extent <= 0
    lo = np.where(flat, lo - pad / 2.0, lo)
    hi = np.where(flat, hi + pad / 2.0, hi)

    cell = (hi - lo) / grid
    axis = np.arange(grid)
    cells = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    cells = np.repeat(cells, per_cell, axis=0)
    centers = lo + (cells + rng.uniform(size=cells.shape)) * cell
    scale = scale_fraction * float(cell.mean())
    return make_set("env", centers, random_quaternions(rng, len(centers)), scale, opacity,
                    np.zeros((SH_COEFFS, 3)))


@dataclass
class DensifyReport:
    """
    Attributes:
        clones (int): Surfels added by cloning.
        splits (int): Surfels split; each replaces one parent with two children.
        pruned (int): Surfels removed by the opacity floor and the count cap.
        origin (np.ndarray): For each surviving surfel, its index in the input set, or -1 if new.
    """
    clones: int = 0
    splits: int = 0
    pruned: int = 0
    origin: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def densify_and_prune(gset: GaussianSet, grads: GradStore, cfg: TrainConfig, rng: np.random.Generator,
                      extent: float, cap: Optional[int] = None) -> tuple[GaussianSet, DensifyReport]:
    """
    Clones, splits and prunes a set from the statistics accumulated since the last pass.

    Args:
        gset (GaussianSet): Set to densify (left untouched).
        grads (GradStore): Store holding positional_norm, hit_count and weight_accum per surfel.
        cfg (TrainConfig): Threshold, clone/split and pruning settings.
        rng (np.random.Generator): Source of split offsets.
        extent (float): Scene extent the clone bound is relative to.
        cap (int, optional): Maximum surviving count; the lowest accumulated weights go first.

    Returns:
        tuple[GaussianSet, DensifyReport]: The new set and what happened to it, with
        len(new) == len(gset) + clones + splits - pruned.

    Behavior:
        - Selected surfels have a mean depth-scaled positional gradient (sum / hits) at or
          above densify_threshold.
        - Selected surfels no larger than clone_scale_fraction * extent are cloned in place;
          larger ones are replaced by two children offset by N(0, scale) along the tangent
          axes with scales divided by split_scale_divisor.
        - New surfels inherit their source's accumulated weight for the cap ranking.
    """
    count = len(gset)
    hits = grads.hit_count
    mean_grad = np.divide(grads.positional_norm, hits, out=np.zeros(count), where=hits > 0)
    selected = mean_grad >= cfg.densify_threshold
    max_scale = np.exp(gset.log_scales).max(axis=1) if count else np.zeros(0)
    clone = selected & (max_scale <= cfg.clone_scale_fraction * extent)
    split = selected & ~clone

    clone_idx = np.flatnonzero(clone)
    split_idx = np.flatnonzero(split)
    keep_idx = np.flatnonzero(~split)

    children = gset.select(np.repeat(split_idx, 2))
    if len(children):
        samples = rng.normal(size=(len(children), 2)) * np.exp(children.log_scales)
        rot = children.rotation_matrices()
        children.centers += rot[:, :, 0] * samples[:, :1] + rot[:, :, 1] * samples[:, 1:]
        children.log_scales -= math.log(cfg.split_scale_divisor)

    grown = gset.select(keep_idx).concat(gset.select(clone_idx)).concat(children)
    added = len(clone_idx) + len(children)
    origin = np.concatenate([keep_idx, np.full(added, -1)]).astype(np.int64)
    source = np.concatenate([keep_idx, clone_idx, np.repeat(split_idx, 2)]).astype(np.int64)

    alive = np.flatnonzero(sigmoid(grown.raw_opacity) >= cfg.prune_opacity)
    if cap is not None and len(alive) > cap:
        weights = grads.weight_accum[source[alive]]
        order = np.argsort(-weights, kind="stable")
        alive = np.sort(alive[order[:cap]])

    report = DensifyReport(clones=len(clone_idx), splits=len(split_idx), pruned=len(grown) - len(alive),
                           origin=origin[alive])
    return grown.select(alive), report


def reset_opacity(gset: GaussianSet, ceiling: float = OPACITY_RESET_CEILING):
    """Clamps every opacity to at most `ceiling`, in place."""
    np.minimum(gset.raw_opacity, inverse_sigmoid(ceiling), out=gset.raw_opacity)
    gset.touch()


@dataclass
class StepMetrics:
    step: int
    phase: str
    loss_total: float
    loss_rgb: float
    loss_norm: float = 0.0
    loss_mono: float = 0.0
    loss_extra: float = 0.0
    mono_skipped: int = 0
    psnr: float = 0.0
    n_base: int = 0
    n_env: int = 0
    clones: int = 0
    splits: int = 0
    pruned: int = 0

    def row(self) -> list:
        return [getattr(self, column) for column in METRICS_COLUMNS]


@dataclass
class TrainState:
    """
    Everything a training run carries from step to step, and everything a checkpoint stores.

    Attributes:
        step (int): Number of completed steps.
        base_stats / env_stats (GradStore): Densification statistics since the last pass.
        view_queue (list[int]): Remaining camera indices of the current shuffled epoch.
    """
    cfg: TrainConfig
    base: GaussianSet
    env: Optional[GaussianSet]
    rng: np.random.Generator
    extent: float
    base_adam: Adam = field(default_factory=Adam)
    env_adam: Adam = field(default_factory=Adam)
    base_stats: Optional[GradStore] = None
    env_stats: Optional[GradStore] = None
    step: int = 0
    view_queue: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.base_stats is None:
            self.base_stats = GradStore.zeros_for(self.base)
        if self.env_stats is None and self.env is not None:
            self.env_stats = GradStore.zeros_for(self.env)

    @property
    def phase(self) -> str:
        return "bootstrap" if self.step < self.cfg.bootstrap_steps else "joint"

    @property
    def env_active(self) -> bool:
        return self.phase == "joint" and self.cfg.env_after_bootstrap and self.env is not None

    def next_view(self, count: int) -> int:
        if not self.view_queue:
            self.view_queue = self.rng.permutation(count).tolist()
        return self.view_queue.pop(0)


def compose_options(cfg: TrainConfig, env_enabled: bool) -> ComposeOptions:
    return ComposeOptions(
        trace=TraceOptions(k=cfg.k, termination=cfg.termination, threads=cfg.threads),
        alpha_floor=cfg.alpha_floor,
        blend_floor=cfg.blend_floor,
        offset=cfg.reflection_offset,
        env_enabled=env_enabled,
        joint_optimization=cfg.joint_optimization,
    )


def train_step(state: TrainState, camera: CameraModel, gt_image: np.ndarray,
               mono_normals: Optional[np.ndarray] = None,
               hooks: Optional[dict[str, ModuleType]] = None) -> StepMetrics:
    """
    One optimization step on one view.

    Renders the view (base only during bootstrap), evaluates
    L = L_rgb + lambda_norm * L_norm + lambda_mono * L_mono + lambda_extra * L_extra,
    backpropagates through both passes and applies the Adam update to the participating sets.

    Args:
        state (TrainState): Run state, advanced by one step.
        camera (CameraModel): View to render.
        gt_image (np.ndarray): (H, W, 3) linear target image.
        mono_normals (np.ndarray, optional): (H, W, 3) camera-frame monocular normals; zero
            vectors mark invalid pixels. Missing maps skip the monocular term.
        hooks (dict, optional): Loaded hook modules; the extra term is skipped without one.

    Returns:
        StepMetrics: Loss components, PSNR and set sizes for the completed step.

    Raises:
        NumericalError: If the loss or a gradient is not finite.
    """
    cfg = state.cfg
    step = state.step
    phase = state.phase
    env_active = state.env_active
    frame = compose_frame(state.base, state.env if env_active else None, camera, compose_options(cfg, env_active))
    image = frame.image()
    gt_image = np.asarray(gt_image, dtype=float)

    l_rgb, g_image = loss_rgb(image, gt_image, cfg.l1_weight, cfg.ssim_weight)
    shape = camera.shape
    g_normal = np.zeros(shape + (3,))
    g_depth = np.zeros(shape)
    n_map = frame.gbuffer.image("normal")
    mask = frame.gbuffer.image("alpha") > cfg.alpha_floor

    l_norm = 0.0
    if cfg.lambda_norm > 0:
        l_norm, g_n, g_d = loss_normal_consistency(n_map, frame.gbuffer.image("depth"), camera, mask)
        g_normal += cfg.lambda_norm * g_n
        g_depth += cfg.lambda_norm * g_d

    l_mono = 0.0
    mono_skipped = 0
    if cfg.lambda_mono > 0:
        if mono_normals is None:
            mono_skipped = 1
        else:
            # camera-frame rows to world: R^T m, written for row vectors
            mono_world = np.asarray(mono_normals, dtype=float) @ camera.rotation
            l_mono, g_m = loss_mono_normal(n_map, mono_world, mask)
            g_normal += cfg.lambda_mono * g_m

    l_extra = 0.0
    if cfg.lambda_extra > 0 and hooks is not None:
        name = cfg.extra_term_hook
        l_extra, g_extra = hooks["extra_term_hook"].run(image, gt_image, cfg.hook_config.get(name, {}))
        g_image = g_image + cfg.lambda_extra * np.asarray(g_extra, dtype=float)

    total = l_rgb + cfg.lambda_norm * l_norm + cfg.lambda_mono * l_mono + cfg.lambda_extra * l_extra
    if not math.isfinite(total):
        raise NumericalError(f"non-finite loss {total}", step)

    base_grads, env_grads = backward_frame(frame, g_image, GBufferGrads(normal=g_normal, depth=g_depth))
    if not base_grads.is_finite() or (env_grads is not None and not env_grads.is_finite()):
        raise NumericalError("non-finite gradient", step)

    lrs = learning_rates(cfg, step, state.extent)
    state.base_adam.step(state.base.parameters(), base_grads.params, lrs)
    state.base.normalize_rotations()
    state.base.touch()
    state.base_stats.accumulate_stats(base_grads)
    if env_active and env_grads is not None:
        state.env_adam.step(state.env.parameters(), env_grads.params, lrs)
        state.env.normalize_rotations()
        state.env.touch()
        state.env_stats.accumulate_stats(env_grads)

    state.step += 1
    return StepMetrics(
        step=step, phase=phase, loss_total=total, loss_rgb=l_rgb, loss_norm=l_norm, loss_mono=l_mono,
        loss_extra=l_extra, mono_skipped=mono_skipped, psnr=psnr(image, gt_image),
        n_base=len(state.base), n_env=len(state.env) if state.env is not None else 0,
    )


def densify_state(state: TrainState, hooks: Optional[dict[str, ModuleType]] = None) -> DensifyReport:
    """
    Runs the densification hooks and densify_and_prune on the participating sets, remapping
    optimizer moments and restarting the statistics.

    Returns:
        DensifyReport: Summed counts over both sets (origin refers to the base set).
    """
    cfg = state.cfg
    if hooks is not None:
        for hook_field in ("normal_propagation_hook", "color_sabotage_hook"):
            name = getattr(cfg, hook_field)
            if hooks[hook_field].run(state.base, state.env, state.base_stats, cfg.hook_config.get(name, {}), state.rng):
                state.base.touch()

    state.base, report = densify_and_prune(state.base, state.base_stats, cfg, state.rng, state.extent)
    state.base_adam.remap(report.origin)
    state.base_stats = GradStore.zeros_for(state.base)

    if state.env_active:
        state.env, env_report = densify_and_prune(state.env, state.env_stats, cfg, state.rng, state.extent,
                                                  cap=cfg.env_cap)
        state.env_adam.remap(env_report.origin)
        state.env_stats = GradStore.zeros_for(state.env)
        report = DensifyReport(clones=report.clones + env_report.clones, splits=report.splits + env_report.splits,
                               pruned=report.pruned + env_report.pruned, origin=report.origin)
    return report


def create_env(state: TrainState, points: Optional[np.ndarray]):
    cfg = state.cfg
    seeds = points if points is not None and len(points) else state.base.centers
    state.env = init_env_set(seeds, state.rng, grid=cfg.env_grid, per_cell=cfg.env_samples_per_cell,
                             quantile=cfg.env_bounds_quantile, scale_fraction=cfg.env_init_scale,
                             opacity=cfg.env_init_opacity)
    state.env_adam = Adam()
    state.env_stats = GradStore.zeros_for(state.env)
    log_info(f"Environment set initialised with {len(state.env)} surfels at step {state.step}")


def checkpoint_path(out_dir: str, step: int) -> str:
    return os.path.join(out_dir, CHECKPOINT_DIR, f"step_{step:06d}")


def save_checkpoint(state: TrainState, out_dir: str) -> str:
    """
    Writes checkpoints/step_NNNNNN/ (base.ply, env.ply, state.npz) atomically.

    The directory is assembled under a temporary name and renamed into place, so a reader
    sees either the complete checkpoint or none.

    Returns:
        str: The checkpoint directory.
    """
    final = checkpoint_path(out_dir, state.step)
    tmp = final + ".tmp"
    if os.path.isdir(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    save_gaussians(os.path.join(tmp, "base.ply"), state.base)
    if state.env is not None:
        save_gaussians(os.path.join(tmp, "env.ply"), state.env)

    arrays = {}
    arrays.update(state.base_adam.state_arrays("base_adam"))
    arrays.update(state.env_adam.state_arrays("env_adam"))
    for prefix, stats in (("base_stats", state.base_stats), ("env_stats", state.env_stats)):
        if stats is not None:
            arrays[f"{prefix}.positional_norm"] = stats.positional_norm
            arrays[f"{prefix}.hit_count"] = stats.hit_count
            arrays[f"{prefix}.weight_accum"] = stats.weight_accum
    meta = {
        "step": state.step,
        "extent": state.extent,
        "rng": state.rng.bit_generator.state,
        "view_queue": state.view_queue,
        "base_adam_steps": state.base_adam.t,
        "env_adam_steps": state.env_adam.t,
    }
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(os.path.join(tmp, "state.npz"), **arrays)

    if os.path.isdir(final):
        shutil.rmtree(final)
    os.replace(tmp, final)
    return final


def _load_stats(arrays, prefix: str, gset: GaussianSet) -> GradStore:
    stats = GradStore.zeros_for(gset)
    if f"{prefix}.positional_norm" in arrays:
        stats.positional_norm[:] = arrays[f"{prefix}.positional_norm"]
        stats.hit_count[:] = arrays[f"{prefix}.hit_count"]
        stats.weight_accum[:] = arrays[f"{prefix}.weight_accum"]
    return stats


def load_checkpoint(path: str, cfg: TrainConfig) -> TrainState:
    """
    Restores a TrainState written by save_checkpoint.

    Raises:
        FileNotFoundError: If the directory or its state.npz is missing.
    """
    state_file = os.path.join(path, "state.npz")
    if not os.path.isfile(state_file):
        raise FileNotFoundError(f"Checkpoint state not found: {state_file}")
    base = load_gaussians(os.path.join(path, "base.ply"), "base")
    env_file = os.path.join(path, "env.ply")
    env = load_gaussians(env_file, "env") if os.path.isfile(env_file) else None

    with np.load(state_file) as arrays:
        meta = json.loads(str(arrays["meta"]))
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        state = TrainState(cfg=cfg, base=base, env=env, rng=rng, extent=float(meta["extent"]),
                           step=int(meta["step"]), view_queue=list(meta["view_queue"]))
        state.base_adam.load_state(arrays, "base_adam", meta["base_adam_steps"])
        state.env_adam.load_state(arrays, "env_adam", meta["env_adam_steps"])
        state.base_stats = _load_stats(arrays, "base_stats", base)
        if env is not None:
            state.env_stats = _load_stats(arrays, "env_stats", env)
    return state


def open_metrics(path: str, first_step: int):
    """
    Opens the metrics CSV for appending from `first_step`, keeping earlier rows of a resumed run.
    """
    kept = []
    if first_step > 0 and os.path.isfile(path):
        with open(path, newline="") as f:
            lines = f.read().splitlines()
        for line in lines[2:]:
            if line and int(line.split(",", 1)[0]) < first_step:
                kept.append(line)
    f = open(path, "w", newline="")
    f.write(METRICS_SCHEMA + "\n")
    f.write(",".join(METRICS_COLUMNS) + "\n")
    for line in kept:
        f.write(line + "\n")
    return f


@dataclass
class TrainResult:
    state: TrainState
    metrics_path: str
    base_path: str
    env_path: Optional[str]
    metrics: list[StepMetrics] = field(default_factory=list)


def initial_state(cfg: TrainConfig, bundle: SceneBundle) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    if bundle.base is not None:
        base = bundle.base.copy()
    elif bundle.points_path is not None:
        points, colors = bundle.load_points()
        base = init_base_set(points, colors, rng)
    else:
        raise DataError(f"Scene at {bundle.root} has neither a base set nor a sparse point cloud")
    env = bundle.env.copy() if bundle.env is not None else None
    return TrainState(cfg=cfg, base=base, env=env, rng=rng, extent=camera_extent(bundle.cameras))


def train(cfg: TrainConfig, bundle: SceneBundle, out_dir: str, threads: Optional[int] = None,
          resume: Optional[str] = None) -> TrainResult:
    """
    Runs the full schedule: bootstrap, environment initialisation, joint optimization,
    densification, opacity resets, metrics and checkpoints.

    Args:
        cfg (TrainConfig): Validated configuration.
        bundle (SceneBundle): Scene with cameras, ground-truth images and a base set or point cloud.
        out_dir (str): Output directory for metrics.csv, checkpoints/ and the final PLYs.
        threads (int, optional): Overrides cfg.threads.
        resume (str, optional): Checkpoint directory to continue from.

    Returns:
        TrainResult: Final state and output paths.
    """
    if threads is not None:
        cfg = cfg.model_copy(update={"threads": threads})
    os.makedirs(out_dir, exist_ok=True)
    images = bundle.load_images()
    if not images:
        raise DataError(f"Scene at {bundle.root} has no ground-truth images")
    mono = bundle.load_mono_normals()
    hooks = load_hooks(cfg)

    if resume is not None:
        state = load_checkpoint(resume, cfg)
        log_info(f"Resumed from {resume} at step {state.step}")
    else:
        state = initial_state(cfg, bundle)

    points = None
    if bundle.points_path is not None:
        points, _ = bundle.load_points()

    metrics_path = os.path.join(out_dir, "metrics.csv")
    metrics = []
    with open_metrics(metrics_path, state.step) as metrics_file, Progress(
            TextColumn("[bold]{task.description}"), BarColumn(), MofNCompleteColumn(), TimeElapsedColumn(),
            console=console) as progress:
        writer = csv.writer(metrics_file)
        task = progress.add_task("training", total=cfg.total_steps, completed=state.step)
        while state.step < cfg.total_steps:
            if state.step == cfg.bootstrap_steps and state.env is None and cfg.env_after_bootstrap:
                create_env(state, points)

            view = state.next_view(len(images))
            mono_map = mono[view] if mono is not None else None
            row = train_step(state, bundle.cameras[view], images[view], mono_map, hooks)

            completed = state.step
            if cfg.densify_from <= completed <= cfg.densify_until and completed % cfg.densify_interval == 0:
                report = densify_state(state, hooks)
                row.clones, row.splits, row.pruned = report.clones, report.splits, report.pruned
                row.n_base = len(state.base)
                row.n_env = len(state.env) if state.env is not None else 0
                log_info(f"step {completed}: +{report.clones} clones, {report.splits} splits, "
                         f"-{report.pruned} pruned -> {row.n_base} base / {row.n_env} env")
            if completed <= cfg.densify_until and completed % cfg.opacity_reset_interval == 0:
                reset_opacity(state.base)
                state.base_adam.reset("raw_opacity")

            writer.writerow(row.row())
            metrics_file.flush()
            metrics.append(row)
            progress.update(task, completed=completed, description=f"{row.phase} psnr {row.psnr:.2f}")

            if completed % cfg.checkpoint_interval == 0 or completed == cfg.total_steps:
                path = save_checkpoint(state, out_dir)
                log_info(f"Checkpoint written to {path}")

    base_path = os.path.join(out_dir, "base.ply")
    save_gaussians(base_path, state.base)
    env_path = None
    if state.env is not None:
        env_path = os.path.join(out_dir, "env.ply")
        save_gaussians(env_path, state.env)
    return TrainResult(state=state, metrics_path=metrics_path, base_path=base_path, env_path=env_path, metrics=metrics)

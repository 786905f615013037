from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from cameras import CameraModel, camera_rays
from errors import StaleStateError
from grad import GradStore, RayUpstream, backward_rays
from primitives import GaussianSet
from tracer import Bvh, Ray, RaySample, TraceOptions, build_set_bvh, render_rays


@dataclass
class ComposeOptions:
    """
    Attributes:
        trace (TraceOptions): Options shared by both passes.
        alpha_floor (float): Reflected rays spawn only where accumulated alpha exceeds this.
        blend_floor (float): ...and where the composited blend weight exceeds this.
        offset (float, optional): Reflected-ray origin offset along the normal; defaults to
            1e-4 of the base set's bounding-box diagonal.
        env_enabled (bool): False renders base only (final = base color).
        joint_optimization (bool): False stops reflected-ray gradients at the G-buffer.
    """
    trace: TraceOptions = field(default_factory=TraceOptions)
    alpha_floor: float = 0.01
    blend_floor: float = 0.001
    offset: Optional[float] = None
    env_enabled: bool = True
    joint_optimization: bool = True


@dataclass
class GBuffer:
    """
    Per-pixel base-pass outputs, stored flat (P = height * width rows).

    Attributes:
        position (np.ndarray): (P, 3) composited surface position.
        normal (np.ndarray): (P, 3) renormalized normal; zero where alpha is zero.
        normal_raw (np.ndarray): (P, 3) composited normal before renormalization.
        depth (np.ndarray): (P,) composited depth.
        base_color (np.ndarray): (P, 3) composited base color.
        blend (np.ndarray): (P,) composited blend weight.
        alpha (np.ndarray): (P,) accumulated alpha.
        shape (tuple, optional): (height, width) for image views.
    """
    position: np.ndarray
    normal: np.ndarray
    normal_raw: np.ndarray
    depth: np.ndarray
    base_color: np.ndarray
    blend: np.ndarray
    alpha: np.ndarray
    shape: Optional[tuple[int, int]] = None

    @classmethod
    def from_samples(cls, samples: list[RaySample], shape: Optional[tuple[int, int]] = None) -> "GBuffer":
        count = len(samples)
        normal_raw = np.array([s.normal for s in samples]).reshape(count, 3)
        alpha = np.array([s.alpha for s in samples], dtype=float)
        norm = np.linalg.norm(normal_raw, axis=1, keepdims=True)
        valid = (alpha[:, None] > 0) & (norm > 0)
        normal = np.divide(normal_raw, norm, out=np.zeros_like(normal_raw), where=valid)
        return cls(
            position=np.array([s.position for s in samples]).reshape(count, 3),
            normal=normal,
            normal_raw=normal_raw,
            depth=np.array([s.depth for s in samples], dtype=float),
            base_color=np.array([s.color for s in samples]).reshape(count, 3),
            blend=np.array([s.blend for s in samples], dtype=float),
            alpha=alpha,
            shape=shape,
        )

    def image(self, name: str) -> np.ndarray:
        values = getattr(self, name)
        if self.shape is None:
            return values
        return values.reshape(self.shape + values.shape[1:])


@dataclass
class GBufferGrads:
    """Upstream gradients on G-buffer maps produced by the geometry losses."""
    normal: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None


@dataclass
class ComposedFrame:
    """
    Result of the two-pass render, with everything the backward pass replays.

    Attributes:
        final (np.ndarray): (P, 3) blended color.
        gbuffer (GBuffer): Base-pass outputs.
        reflection (np.ndarray): (P, 3) environment color along reflected rays (black elsewhere).
        reflected_rays (list): Per pixel, the reflected Ray or None.
        reflect_enabled (bool): Whether the reflection pass participated.
    """
    final: np.ndarray
    gbuffer: GBuffer
    reflection: np.ndarray
    reflected_rays: list[Optional[Ray]]
    reflect_enabled: bool
    origins: np.ndarray
    directions: np.ndarray
    base_samples: list[RaySample]
    env_samples: dict[int, RaySample]
    base: GaussianSet
    env: Optional[GaussianSet]
    base_bvh: Bvh
    env_bvh: Optional[Bvh]
    base_generation: int
    env_generation: Optional[int]
    offset: float
    opts: ComposeOptions
    camera: Optional[CameraModel] = None

    @property
    def shape(self) -> Optional[tuple[int, int]]:
        return self.gbuffer.shape

    def image(self, name: str = "final") -> np.ndarray:
        values = self.final if name == "final" else getattr(self, name)
        if self.shape is None:
            return values
        return values.reshape(self.shape + values.shape[1:])

    @property
    def reflect_mask(self) -> np.ndarray:
        return np.array([r is not None for r in self.reflected_rays], dtype=bool)


def reflect_direction(d_cam: np.ndarray, n: np.ndarray) -> Optional[np.ndarray]:
    """
    Mirrors the camera ray direction about the surface normal.

    Args:
        d_cam (np.ndarray): Unit camera ray direction.
        n (np.ndarray): Unit surface normal, or zero for background.

    Returns:
        np.ndarray | None: d_cam - 2 (d_cam . n) n, or None for a zero normal.
    """
    n = np.asarray(n, dtype=float)
    if not np.any(n):
        return None
    d_cam = np.asarray(d_cam, dtype=float)
    return d_cam - 2.0 * float(d_cam @ n) * n


def scene_offset(base: Optional[GaussianSet]) -> float:
    """1e-4 of the base set's bounding-box diagonal; 1e-4 when there is no base extent."""
    if base is None or not len(base):
        return 1e-4
    diagonal = float(np.linalg.norm(base.centers.max(axis=0) - base.centers.min(axis=0)))
    return 1e-4 * diagonal if diagonal > 0 else 1e-4


def _make_rays(origins: np.ndarray, directions: np.ndarray) -> list[Ray]:
    return [Ray(origins[i], directions[i]) for i in range(len(origins))]


def trace_base(base: GaussianSet, rays: list[Ray], opts: ComposeOptions, bvh: Optional[Bvh] = None,
               shape: Optional[tuple[int, int]] = None) -> tuple[GBuffer, list[RaySample], Bvh]:
    bvh = bvh or build_set_bvh(base)
    samples = render_rays(bvh, base, rays, opts.trace)
    return GBuffer.from_samples(samples, shape), samples, bvh


def render_base(base: GaussianSet, camera: CameraModel, opts: Optional[ComposeOptions] = None) -> GBuffer:
    opts = opts or ComposeOptions()
    origins, directions = camera_rays(camera)
    return trace_base(base, _make_rays(origins, directions), opts, shape=camera.shape)[0]


def spawn_reflected_rays(gbuf: GBuffer, directions: np.ndarray, offset: float,
                         opts: ComposeOptions) -> list[Optional[Ray]]:
    """
    Reflected rays for pixels above the alpha and blend floors; None elsewhere.
    """
    rays: list[Optional[Ray]] = []
    for i in range(len(directions)):
        if gbuf.alpha[i] <= opts.alpha_floor or gbuf.blend[i] <= opts.blend_floor:
            rays.append(None)
            continue
        d_ref = reflect_direction(directions[i], gbuf.normal[i])
        if d_ref is None:
            rays.append(None)
            continue
        rays.append(Ray(gbuf.position[i] + offset * gbuf.normal[i], d_ref))
    return rays


def trace_reflection(env: GaussianSet, rays: list[Optional[Ray]], opts: ComposeOptions,
                     bvh: Optional[Bvh] = None) -> tuple[np.ndarray, dict[int, RaySample], Bvh]:
    bvh = bvh or build_set_bvh(env)
    active = [i for i, ray in enumerate(rays) if ray is not None]
    samples = render_rays(bvh, env, [rays[i] for i in active], opts.trace)
    colors = np.zeros((len(rays), 3))
    by_pixel = {}
    for i, sample in zip(active, samples):
        colors[i] = sample.color
        by_pixel[i] = sample
    return colors, by_pixel, bvh


def render_reflection(env: GaussianSet, gbuf: GBuffer, camera: CameraModel,
                      opts: Optional[ComposeOptions] = None, offset: Optional[float] = None,
                      base: Optional[GaussianSet] = None) -> tuple[np.ndarray, list[Optional[Ray]]]:
    """
    Environment color along reflected rays spawned from a G-buffer.

    The origin offset is `offset`, else `opts.offset`, else `scene_offset(base)`, which is
    what compose_rays uses for the same base set.

    Returns:
        tuple[np.ndarray, list]: (P, 3) reflection colors and the per-pixel reflected rays.
    """
    opts = opts or ComposeOptions()
    _, directions = camera_rays(camera)
    if offset is None:
        offset = opts.offset if opts.offset is not None else scene_offset(base)
    rays = spawn_reflected_rays(gbuf, directions, offset, opts)
    colors, _, _ = trace_reflection(env, rays, opts)
    return colors, rays


def compose_rays(base: GaussianSet, env: Optional[GaussianSet], origins: np.ndarray, directions: np.ndarray,
                 opts: Optional[ComposeOptions] = None, shape: Optional[tuple[int, int]] = None,
                 camera: Optional[CameraModel] = None, base_bvh: Optional[Bvh] = None,
                 env_bvh: Optional[Bvh] = None) -> ComposedFrame:
    """
    Two-pass render over arbitrary primary rays: base pass, reflected environment pass, blend.

    Args:
        base (GaussianSet): Base set.
        env (GaussianSet, optional): Environment set; None renders base only.
        origins (np.ndarray): (P, 3) primary ray origins.
        directions (np.ndarray): (P, 3) unit primary ray directions.
        opts (ComposeOptions, optional): Render options.
        shape (tuple, optional): (height, width) for image views.
        camera (CameraModel, optional): Recorded on the frame.
        base_bvh, env_bvh (Bvh, optional): Prebuilt BVHs matching the sets.

    Returns:
        ComposedFrame: Final color per (1 - beta) * c_base + beta * c_ref.
    """
    opts = opts or ComposeOptions()
    gbuf, base_samples, base_bvh = trace_base(base, _make_rays(origins, directions), opts, base_bvh, shape)
    offset = opts.offset if opts.offset is not None else scene_offset(base)
    reflect_enabled = opts.env_enabled and env is not None

    if reflect_enabled:
        reflected = spawn_reflected_rays(gbuf, directions, offset, opts)
        reflection, env_samples, env_bvh = trace_reflection(env, reflected, opts, env_bvh)
        beta = gbuf.blend[:, None]
        final = (1.0 - beta) * gbuf.base_color + beta * reflection
    else:
        reflected = [None] * len(origins)
        reflection = np.zeros_like(gbuf.base_color)
        env_samples = {}
        env_bvh = None
        final = gbuf.base_color.copy()

    return ComposedFrame(
        final=final, gbuffer=gbuf, reflection=reflection, reflected_rays=reflected,
        reflect_enabled=reflect_enabled, origins=origins, directions=directions,
        base_samples=base_samples, env_samples=env_samples, base=base, env=env,
        base_bvh=base_bvh, env_bvh=env_bvh, base_generation=base.generation,
        env_generation=None if env is None else env.generation, offset=offset, opts=opts, camera=camera,
    )


def compose_frame(base: GaussianSet, env: Optional[GaussianSet], camera: CameraModel,
                  opts: Optional[ComposeOptions] = None) -> ComposedFrame:
    origins, directions = camera_rays(camera)
    return compose_rays(base, env, origins, directions, opts, shape=camera.shape, camera=camera)


def _check_frame(frame: ComposedFrame):
    if frame.base.generation != frame.base_generation:
        raise StaleStateError(
            f"frame rendered at base generation {frame.base_generation}, set is now {frame.base.generation}"
        )
    if frame.env is not None and frame.env.generation != frame.env_generation:
        raise StaleStateError(
            f"frame rendered at env generation {frame.env_generation}, set is now {frame.env.generation}"
        )


def backward_frame(frame: ComposedFrame, image_grad: np.ndarray, gbuffer_grads: Optional[GBufferGrads] = None,
                   threads: Optional[int] = None) -> tuple[GradStore, Optional[GradStore]]:
    """
    Backpropagates an image gradient through the blend, the reflection pass and the base pass.

    Reflected-ray origin and direction gradients are chained into the G-buffer position and
    renormalized normal (through the reflection and offset Jacobians), then into the raw
    composited normal, and join the base-pass backward.

    Args:
        frame (ComposedFrame): Frame from compose_frame/compose_rays on unchanged sets.
        image_grad (np.ndarray): dL/d(final), (P, 3) or (H, W, 3).
        gbuffer_grads (GBufferGrads, optional): Extra gradients on the normal and depth maps.
        threads (int, optional): Worker count; defaults to the frame's trace options.

    Returns:
        tuple[GradStore, GradStore | None]: Base and env gradient stores (env None without an env set).

    Raises:
        StaleStateError: If either set changed since the frame was rendered.
    """
    _check_frame(frame)
    trace = frame.opts.trace
    if threads is not None:
        trace = TraceOptions(k=trace.k, termination=trace.termination, alpha_min=trace.alpha_min,
                             alpha_max=trace.alpha_max, record_hits=trace.record_hits, threads=threads)
    gbuf = frame.gbuffer
    count = len(frame.final)
    g = np.asarray(image_grad, dtype=float).reshape(count, 3)

    base_grads = GradStore.zeros_for(frame.base)
    env_grads = GradStore.zeros_for(frame.env) if frame.env is not None else None

    g_position = np.zeros((count, 3))
    g_unit_normal = np.zeros((count, 3))
    g_depth = np.zeros(count)
    if gbuffer_grads is not None:
        if gbuffer_grads.normal is not None:
            g_unit_normal += np.asarray(gbuffer_grads.normal, dtype=float).reshape(count, 3)
        if gbuffer_grads.depth is not None:
            g_depth += np.asarray(gbuffer_grads.depth, dtype=float).reshape(count)

    if frame.reflect_enabled:
        beta = gbuf.blend[:, None]
        g_base_color = (1.0 - beta) * g
        g_reflection = beta * g
        g_blend = np.sum(g * (frame.reflection - gbuf.base_color), axis=1)

        active = sorted(frame.env_samples)
        if active and len(frame.env):
            upstreams = [RayUpstream(color=g_reflection[i]) for i in active]
            ray_grads = backward_rays(
                frame.env_bvh, frame.env, [frame.reflected_rays[i] for i in active], upstreams, env_grads,
                [frame.env_samples[i] for i in active], trace,
            )
            if frame.opts.joint_optimization:
                for i, ray_grad in zip(active, ray_grads):
                    n_hat = gbuf.normal[i]
                    d_cam = frame.directions[i]
                    g_position[i] += ray_grad.d_origin
                    g_unit_normal[i] += frame.offset * ray_grad.d_origin
                    d_d = ray_grad.d_direction
                    g_unit_normal[i] -= 2.0 * (float(d_cam @ n_hat) * d_d + d_cam * float(n_hat @ d_d))
    else:
        g_base_color = g
        g_blend = np.zeros(count)

    # renormalization Jacobian: dn_hat/dN = (I - n_hat n_hat^T) / |N|
    norms = np.linalg.norm(gbuf.normal_raw, axis=1)
    valid = np.any(gbuf.normal != 0.0, axis=1)
    radial = np.sum(g_unit_normal * gbuf.normal, axis=1, keepdims=True)
    g_raw_normal = np.zeros((count, 3))
    g_raw_normal[valid] = ((g_unit_normal - radial * gbuf.normal)[valid] / norms[valid, None])

    upstreams = [
        RayUpstream(color=g_base_color[i], normal=g_raw_normal[i], position=g_position[i],
                    depth=float(g_depth[i]), blend=float(g_blend[i]))
        for i in range(count)
    ]
    rays = _make_rays(frame.origins, frame.directions)
    backward_rays(frame.base_bvh, frame.base, rays, upstreams, base_grads, frame.base_samples, trace)
    return base_grads, env_grads

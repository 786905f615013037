from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import StaleStateError
from primitives import GaussianSet, sh_basis, sh_basis_grad
from tracer import GRAZING_EPS, Bvh, Ray, RaySample, TraceOptions, evaluate_hit, integrate_ray, iterate_hits, partition_blocks
from utils.math_utils import quaternion_grad

PARAMETER_NAMES = ("centers", "rotations", "log_scales", "raw_opacity", "sh_coeffs", "raw_blend")


@dataclass
class GradStore:
    """
    Gradient accumulators mirroring a GaussianSet's raw parameters, plus densification statistics.

    Attributes:
        params (dict): Parameter name -> gradient array of the parameter's shape.
        positional_norm (np.ndarray): Sum of depth-scaled positional-gradient norms per surfel.
        hit_count (np.ndarray): Number of contributing hits per surfel.
        weight_accum (np.ndarray): Sum of rendering weights T*alpha per surfel.
    """
    params: dict[str, np.ndarray]
    positional_norm: np.ndarray
    hit_count: np.ndarray
    weight_accum: np.ndarray

    @classmethod
    def zeros_for(cls, gset: GaussianSet) -> "GradStore":
        count = len(gset)
        return cls(
            params={name: np.zeros_like(value) for name, value in gset.parameters().items()},
            positional_norm=np.zeros(count),
            hit_count=np.zeros(count, dtype=np.int64),
            weight_accum=np.zeros(count),
        )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __len__(self) -> int:
        return len(self.positional_norm)

    def zero_(self, stats: bool = False):
        """Zeroes parameter gradients; densification statistics only when `stats` is set."""
        for value in self.params.values():
            value.fill(0.0)
        if stats:
            self.positional_norm.fill(0.0)
            self.hit_count.fill(0)
            self.weight_accum.fill(0.0)

    def add_(self, other: "GradStore"):
        for name, value in other.params.items():
            self.params[name] += value
        self.accumulate_stats(other)

    def accumulate_stats(self, other: "GradStore"):
        self.positional_norm += other.positional_norm
        self.hit_count += other.hit_count
        self.weight_accum += other.weight_accum

    def select(self, origin: np.ndarray) -> "GradStore":
        """
        Reindexes the store after densification.

        Args:
            origin (np.ndarray): For each surfel of the new set, the index of the surfel it
                came from, or -1 for brand-new rows (which start at zero).
        """
        def take(values: np.ndarray) -> np.ndarray:
            out = np.zeros((len(origin),) + values.shape[1:], dtype=values.dtype)
            kept = origin >= 0
            out[kept] = values[origin[kept]]
            return out

        return GradStore(
            params={name: take(value) for name, value in self.params.items()},
            positional_norm=take(self.positional_norm),
            hit_count=take(self.hit_count),
            weight_accum=take(self.weight_accum),
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(value)) for value in self.params.values())


@dataclass
class RayUpstream:
    """Upstream gradients on a RaySample's outputs; None means no gradient on that output."""
    color: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    position: Optional[np.ndarray] = None
    depth: float = 0.0
    blend: float = 0.0
    alpha: float = 0.0

    def is_zero(self) -> bool:
        vectors = (self.color, self.normal, self.position)
        return (all(v is None or not np.any(v) for v in vectors)
                and self.depth == 0.0 and self.blend == 0.0 and self.alpha == 0.0)

    def scaled(self, factor: float) -> "RayUpstream":
        def scale(v):
            return None if v is None else factor * np.asarray(v, dtype=float)
        return RayUpstream(scale(self.color), scale(self.normal), scale(self.position),
                           factor * self.depth, factor * self.blend, factor * self.alpha)


@dataclass
class RayGrad:
    d_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_direction: np.ndarray = field(default_factory=lambda: np.zeros(3))
    visited: Optional[list[tuple[int, float]]] = None


def intersection_depth_grads(v1: np.ndarray, normal_tri: np.ndarray, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Gradients of the plane-intersection depth t = n.(v1 - o) / n.d.

    Args:
        v1 (np.ndarray): Any point on the plane.
        normal_tri (np.ndarray): Plane normal.
        o (np.ndarray): Ray origin.
        d (np.ndarray): Ray direction.

    Returns:
        tuple[np.ndarray, np.ndarray]: (dt/do, dt/dd). Both zero for grazing rays.
    """
    n = np.asarray(normal_tri, dtype=float)
    den = float(n @ d)
    if abs(den) < GRAZING_EPS:
        return np.zeros(3), np.zeros(3)
    num = float(n @ (np.asarray(v1, dtype=float) - o))
    return -n / den, -n * num / (den * den)


def accumulate_densify_stats(grads: GradStore, surfel_id: int, position_grad: np.ndarray, t_hit: float):
    grads.positional_norm[surfel_id] += float(np.linalg.norm(position_grad)) * t_hit / 2.0
    grads.hit_count[surfel_id] += 1


def _feature_dot(upstream: RayUpstream, color, normal, position, depth, blend) -> float:
    total = upstream.depth * depth + upstream.blend * blend
    if upstream.color is not None:
        total += float(upstream.color @ color)
    if upstream.normal is not None:
        total += float(upstream.normal @ normal)
    if upstream.position is not None:
        total += float(upstream.position @ position)
    return total


def backward_ray(bvh: Bvh, gset: GaussianSet, ray: Ray, upstream: RayUpstream, grads: GradStore,
                 forward: Optional[RaySample] = None, opts: Optional[TraceOptions] = None) -> RayGrad:
    """
    Replays a ray front to back and accumulates analytic gradients.

    The replay re-traverses the BVH chunk by chunk, so transient state stays O(k). The
    gradient on each alpha uses the running prefix of weighted contributions together
    with the total taken from the forward sample.

    Args:
        bvh (Bvh): BVH the forward pass used.
        gset (GaussianSet): Set whose raw-parameter gradients are accumulated.
        ray (Ray): The traced ray; its direction need not be unit length.
        upstream (RayUpstream): Gradients on the sample outputs.
        grads (GradStore): Destination accumulators.
        forward (RaySample, optional): Forward result; re-traced when omitted.
        opts (TraceOptions, optional): Must match the forward options.

    Returns:
        RayGrad: dL/d(origin) and dL/d(direction).

    Raises:
        StaleStateError: If the set, BVH or forward sample are from different generations.
    """
    opts = opts or TraceOptions()
    if bvh.generation != gset.generation:
        raise StaleStateError(
            f"backward replay on generation {gset.generation} with a BVH from generation {bvh.generation}"
        )
    if forward is not None and forward.generation != gset.generation:
        raise StaleStateError(
            f"forward sample from generation {forward.generation} replayed on generation {gset.generation}"
        )
    result = RayGrad(visited=[] if opts.record_hits else None)
    if upstream.is_zero() or bvh.surfels is None:
        return result
    if forward is None:
        forward = integrate_ray(bvh, gset, ray, opts)

    surfels = bvh.surfels
    o = ray.origin
    d = ray.direction
    total = _feature_dot(upstream, forward.color, forward.normal, forward.position, forward.depth, forward.blend)
    final_t = forward.transmittance
    d_centers = grads.params["centers"]
    d_rotations = grads.params["rotations"]
    d_log_scales = grads.params["log_scales"]
    d_opacity = grads.params["raw_opacity"]
    d_sh = grads.params["sh_coeffs"]
    d_blend = grads.params.get("raw_blend")
    basis = sh_basis(d)
    basis_grad = sh_basis_grad(d)

    transmittance = 1.0
    prefix = 0.0
    for pid, t in iterate_hits(bvh, ray, opts.k):
        hit = evaluate_hit(surfels, pid, t, ray, opts)
        if hit is None:
            continue
        rot = surfels.rotations[pid]
        normal = hit.normal_sign * rot[:, 2]
        beta = 0.0 if surfels.blend is None else float(surfels.blend[pid])
        weight = transmittance * hit.alpha
        feature = _feature_dot(upstream, hit.color, normal, hit.position, t, beta)
        prefix += weight * feature
        one_minus = 1.0 - hit.alpha
        d_alpha = transmittance * feature - (total - prefix) / one_minus + upstream.alpha * final_t / one_minus

        d_rot = np.zeros((3, 3))
        d_x = np.zeros(3)
        d_t = weight * upstream.depth
        d_p = np.zeros(3)

        if upstream.color is not None:
            d_color = weight * upstream.color * (hit.color > 0.0)
            d_sh[pid] += np.outer(basis, d_color)
            result.d_direction += basis_grad.T @ (surfels.sh_coeffs[pid] @ d_color)
        if upstream.normal is not None:
            d_rot[:, 2] += hit.normal_sign * weight * upstream.normal
        if upstream.position is not None:
            d_x += weight * upstream.position
        if d_blend is not None and upstream.blend != 0.0:
            d_blend[pid] += weight * upstream.blend * beta * (1.0 - beta)

        if not hit.clamped:
            sigma = float(surfels.opacity[pid])
            d_opacity[pid] += d_alpha * hit.gaussian * sigma * (1.0 - sigma)
            d_gauss = d_alpha * sigma
            d_u = -hit.u * hit.gaussian * d_gauss
            d_v = -hit.v * hit.gaussian * d_gauss
            s_u, s_v = surfels.scales[pid]
            offset = hit.position - surfels.centers[pid]
            along = d_u * rot[:, 0] / s_u + d_v * rot[:, 1] / s_v
            d_x += along
            d_p -= along
            d_rot[:, 0] += d_u * offset / s_u
            d_rot[:, 1] += d_v * offset / s_v
            d_log_scales[pid] += (-hit.u * d_u, -hit.v * d_v)

        # x = o + t d
        result.d_origin += d_x
        result.d_direction += t * d_x
        d_t += float(d_x @ d)

        # t = n.(p - o) / n.d
        plane_normal = rot[:, 2]
        den = float(plane_normal @ d)
        if d_t != 0.0 and abs(den) >= GRAZING_EPS:
            d_p += d_t * plane_normal / den
            dt_do, dt_dd = intersection_depth_grads(surfels.centers[pid], plane_normal, o, d)
            result.d_origin += d_t * dt_do
            result.d_direction += d_t * dt_dd
            d_rot[:, 2] += d_t * (surfels.centers[pid] - hit.position) / den

        d_centers[pid] += d_p
        d_rotations[pid] += quaternion_grad(gset.rotations[pid], d_rot)
        accumulate_densify_stats(grads, pid, d_p, t)
        grads.weight_accum[pid] += weight
        if result.visited is not None:
            result.visited.append((pid, t))

        transmittance *= one_minus
        if transmittance < opts.termination:
            break
    return result


def _backward_block(bvh: Bvh, gset: GaussianSet, rays: list[Ray], upstreams: list[RayUpstream],
                    forwards: Optional[list[RaySample]], opts: TraceOptions) -> tuple[list[RayGrad], GradStore]:
    local = GradStore.zeros_for(gset)
    results = []
    for i, ray in enumerate(rays):
        forward = forwards[i] if forwards is not None else None
        results.append(backward_ray(bvh, gset, ray, upstreams[i], local, forward, opts))
    return results, local


def backward_rays(bvh: Bvh, gset: GaussianSet, rays: list[Ray], upstreams: list[RayUpstream], grads: GradStore,
                  forwards: Optional[list[RaySample]] = None, opts: Optional[TraceOptions] = None) -> list[RayGrad]:
    """
    Batch backward pass. Each worker process fills a private GradStore over a contiguous
    block of rays; stores are reduced into `grads` in block order.
    """
    opts = opts or TraceOptions()
    blocks = partition_blocks(len(rays), opts.threads)
    if opts.threads <= 1 or len(blocks) <= 1:
        results, local = _backward_block(bvh, gset, rays, upstreams, forwards, opts)
        grads.add_(local)
        return results
    results = []
    with ProcessPoolExecutor(max_workers=len(blocks)) as pool:
        futures = [
            pool.submit(_backward_block, bvh, gset, rays[b.start:b.stop], upstreams[b.start:b.stop],
                        None if forwards is None else forwards[b.start:b.stop], opts)
            for b in blocks
        ]
        for future in futures:
            block_results, local = future.result()
            results.extend(block_results)
            grads.add_(local)
    return results

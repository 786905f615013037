import bisect
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from errors import StaleStateError
from primitives import GaussianSet, TriangleProxy, eval_sh_unchecked
from utils.math_utils import sigmoid

LEAF_SIZE = 4
SAH_BINS = 12
GRAZING_EPS = 1e-9
BARYCENTRIC_EPS = 1e-12
NO_ID = sys.maxsize


@dataclass
class TraceOptions:
    """
    Knobs of the chunked integrator.

    Attributes:
        k (int): Capacity of the per-chunk hit buffer.
        termination (float): Traversal stops once transmittance drops below this.
        alpha_min (float): Hits with a smaller alpha are skipped.
        alpha_max (float): Alphas are clamped to this value.
        record_hits (bool): Keep the list of integrated (primitive id, depth) pairs.
        threads (int): Worker process count for batch rendering and replay.
    """
    k: int = 16
    termination: float = 1e-4
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.999
    record_hits: bool = False
    threads: int = 1


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0

    @classmethod
    def create(cls, origin, direction, t_min: float = 0.0) -> "Ray":
        direction = np.asarray(direction, dtype=float)
        return cls(np.asarray(origin, dtype=float), direction / np.linalg.norm(direction), float(t_min))


@dataclass
class HitBuffer:
    """Depth-sorted chunk of at most k primitive hits."""
    k: int
    depths: list[float] = field(default_factory=list)
    ids: list[int] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def full(self) -> bool:
        return self.count >= self.k


@dataclass
class RaySample:
    color: np.ndarray
    transmittance: float
    depth: float
    normal: np.ndarray
    position: np.ndarray
    blend: float
    generation: int
    hits: Optional[list[tuple[int, float]]] = None

    @property
    def alpha(self) -> float:
        return 1.0 - self.transmittance

    @classmethod
    def background(cls, generation: int = 0) -> "RaySample":
        return cls(
            color=np.zeros(3), transmittance=1.0, depth=0.0, normal=np.zeros(3),
            position=np.zeros(3), blend=0.0, generation=generation, hits=None,
        )


@dataclass(frozen=True)
class SurfelTable:
    """Activated per-surfel attributes snapshotted when a BVH is built."""
    kind: str
    centers: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    blend: Optional[np.ndarray]
    sh_coeffs: np.ndarray

    @classmethod
    def from_set(cls, gset: GaussianSet) -> "SurfelTable":
        return cls(
            kind=gset.kind,
            centers=gset.centers.copy(),
            rotations=gset.rotation_matrices(),
            scales=np.exp(gset.log_scales),
            opacity=sigmoid(gset.raw_opacity),
            blend=None if gset.raw_blend is None else sigmoid(gset.raw_blend),
            sh_coeffs=gset.sh_coeffs.copy(),
        )


@dataclass
class Bvh:
    """
    Flattened bounding volume hierarchy over triangle proxies.

    Node i covers [node_min[i], node_max[i]]. Inner nodes have left/right child indices;
    leaves have left == -1 and own triangles order[start:start + count].

    Attributes:
        triangles (np.ndarray): (M, 3, 3) triangle vertices in build order.
        triangle_ids (np.ndarray): (M,) owning primitive id per triangle.
        order (np.ndarray): Permutation of triangle indices grouped by leaf.
        planes (dict): primitive id -> (v1, unit normal) of its first triangle.
        generation (int): Generation of the GaussianSet the proxies came from.
        surfels (SurfelTable, optional): Activated surfel snapshot for integration.
    """
    triangles: np.ndarray
    triangle_ids: np.ndarray
    order: np.ndarray
    node_min: list
    node_max: list
    node_left: list
    node_right: list
    node_start: list
    node_count: list
    planes: dict
    generation: int = 0
    surfels: Optional[SurfelTable] = None
    _leaf_tris: list = field(default_factory=list, repr=False)

    @classmethod
    def empty(cls, generation: int = 0, surfels: Optional[SurfelTable] = None) -> "Bvh":
        return cls(
            triangles=np.zeros((0, 3, 3)), triangle_ids=np.zeros(0, dtype=int), order=np.zeros(0, dtype=int),
            node_min=[], node_max=[], node_left=[], node_right=[], node_start=[], node_count=[],
            planes={}, generation=generation, surfels=surfels,
        )

    @property
    def node_count_total(self) -> int:
        return len(self.node_min)

    @property
    def primitive_count(self) -> int:
        return len(self.planes)


def _surface_area(lo: np.ndarray, hi: np.ndarray) -> float:
    ext = np.maximum(hi - lo, 0.0)
    return float(2.0 * (ext[0] * ext[1] + ext[1] * ext[2] + ext[2] * ext[0]))


def _sah_split(centroids: np.ndarray, tri_min: np.ndarray, tri_max: np.ndarray) -> Optional[np.ndarray]:
    """
    Picks the binned-SAH split over all three axes.

    Returns:
        np.ndarray | None: Boolean mask of triangles going left, or None when every
        centroid falls into one bin on every axis.
    """
    c_lo = centroids.min(axis=0)
    c_hi = centroids.max(axis=0)
    best_cost = math.inf
    best_mask = None
    for axis in range(3):
        extent = c_hi[axis] - c_lo[axis]
        if extent <= 0.0:
            continue
        bins = np.minimum(((centroids[:, axis] - c_lo[axis]) / extent * SAH_BINS).astype(int), SAH_BINS - 1)
        for split in range(1, SAH_BINS):
            mask = bins < split
            n_left = int(mask.sum())
            if n_left == 0 or n_left == len(mask):
                continue
            cost = (n_left * _surface_area(tri_min[mask].min(axis=0), tri_max[mask].max(axis=0))
                    + (len(mask) - n_left) * _surface_area(tri_min[~mask].min(axis=0), tri_max[~mask].max(axis=0)))
            if cost < best_cost:
                best_cost = cost
                best_mask = mask
    return best_mask


def build_bvh(proxies: Iterable[TriangleProxy], generation: int = 0) -> Bvh:
    """
    Builds a binned-SAH BVH over the triangles of the given proxies.

    Args:
        proxies (Iterable[TriangleProxy]): Two triangles per surfel.
        generation (int): Generation stamp of the source set.

    Returns:
        Bvh: Deterministic for a fixed input order.

    Raises:
        ValueError: If no proxies are given.
    """
    proxies = list(proxies)
    if not proxies:
        raise ValueError("Cannot build a BVH over an empty proxy set")
    triangles = np.concatenate([np.asarray(p.vertices, dtype=float) for p in proxies])
    triangle_ids = np.repeat([p.primitive_id for p in proxies], [len(p.vertices) for p in proxies])
    return _build(triangles, triangle_ids, generation)


def build_set_bvh(gset: GaussianSet) -> Bvh:
    """Builds the BVH for a GaussianSet and attaches its activated surfel snapshot."""
    surfels = SurfelTable.from_set(gset)
    if not len(gset):
        return Bvh.empty(generation=gset.generation, surfels=surfels)
    triangles = gset.proxy_vertices().reshape(-1, 3, 3)
    triangle_ids = np.repeat(np.arange(len(gset)), 2)
    bvh = _build(triangles, triangle_ids, gset.generation)
    bvh.surfels = surfels
    return bvh


def _build(triangles: np.ndarray, triangle_ids: np.ndarray, generation: int) -> Bvh:
    tri_min = triangles.min(axis=1)
    tri_max = triangles.max(axis=1)
    centroids = triangles.mean(axis=1)
    scale = float(np.max(np.abs(triangles))) + 1.0
    pad = 1e-9 * scale

    order = np.arange(len(triangles))
    node_min, node_max, node_left, node_right, node_start, node_count = [], [], [], [], [], []

    def new_node(start: int, end: int) -> int:
        members = order[start:end]
        node_min.append(tuple(float(c) for c in tri_min[members].min(axis=0) - pad))
        node_max.append(tuple(float(c) for c in tri_max[members].max(axis=0) + pad))
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(start)
        node_count.append(end - start)
        return len(node_min) - 1

    stack = [(new_node(0, len(order)), 0, len(order))]
    while stack:
        node, start, end = stack.pop()
        if end - start <= LEAF_SIZE:
            continue
        members = order[start:end]
        mask = _sah_split(centroids[members], tri_min[members], tri_max[members])
        if mask is None:
            # coincident centroids: split by index
            mask = np.arange(end - start) < (end - start) // 2
        order[start:end] = np.concatenate([members[mask], members[~mask]])
        mid = start + int(mask.sum())
        left = new_node(start, mid)
        right = new_node(mid, end)
        node_left[node] = left
        node_right[node] = right
        node_count[node] = 0
        stack.append((right, mid, end))
        stack.append((left, start, mid))

    planes = {}
    for index in range(len(triangles)):
        pid = int(triangle_ids[index])
        if pid in planes:
            continue
        v1, v2, v3 = triangles[index]
        normal = np.cross(v2 - v1, v3 - v1)
        norm = np.linalg.norm(normal)
        normal = normal / norm if norm > 0 else normal
        planes[pid] = (tuple(float(c) for c in v1), tuple(float(c) for c in normal))

    bvh = Bvh(
        triangles=triangles, triangle_ids=triangle_ids, order=order,
        node_min=node_min, node_max=node_max, node_left=node_left, node_right=node_right,
        node_start=node_start, node_count=node_count, planes=planes, generation=generation,
    )
    bvh._leaf_tris = [_edge_form(triangles[i], int(triangle_ids[i])) for i in order]
    return bvh


def _edge_form(triangle: np.ndarray, pid: int) -> tuple:
    v0, v1, v2 = triangle
    return tuple(float(c) for c in v0), tuple(float(c) for c in v1 - v0), tuple(float(c) for c in v2 - v0), pid


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _triangle_hit(o, d, v0, e1, e2) -> bool:
    """Möller-Trumbore inside test; the depth itself comes from the primitive plane."""
    p = _cross(d, e2)
    det = _dot(e1, p)
    if det == 0.0:
        return False
    inv = 1.0 / det
    tv = (o[0] - v0[0], o[1] - v0[1], o[2] - v0[2])
    u = _dot(tv, p) * inv
    if u < -BARYCENTRIC_EPS or u > 1.0 + BARYCENTRIC_EPS:
        return False
    q = _cross(tv, e1)
    v = _dot(d, q) * inv
    return not (v < -BARYCENTRIC_EPS or u + v > 1.0 + BARYCENTRIC_EPS)


def _plane_depth(plane, o, d) -> Optional[float]:
    v1, n = plane
    den = _dot(n, d)
    if abs(den) < GRAZING_EPS:
        return None
    return ((v1[0] - o[0]) * n[0] + (v1[1] - o[1]) * n[1] + (v1[2] - o[2]) * n[2]) / den


def _slab(lo, hi, o, inv):
    t_near = -math.inf
    t_far = math.inf
    for axis in range(3):
        if inv[axis] is None:
            if o[axis] < lo[axis] or o[axis] > hi[axis]:
                return None
            continue
        t1 = (lo[axis] - o[axis]) * inv[axis]
        t2 = (hi[axis] - o[axis]) * inv[axis]
        if t1 > t2:
            t1, t2 = t2, t1
        t_near = max(t_near, t1)
        t_far = min(t_far, t2)
        if t_near > t_far:
            return None
    return t_near, t_far


def next_chunk(bvh: Bvh, ray: Ray, after_depth: float, after_id: int = NO_ID, k: int = 16) -> HitBuffer:
    """
    Collects the k nearest primitive hits strictly after the (depth, id) cursor.

    Args:
        bvh (Bvh): Acceleration structure to traverse.
        ray (Ray): The ray; hits must also satisfy t > ray.t_min.
        after_depth (float): Depth of the last delivered hit.
        after_id (int): Primitive id of the last delivered hit; the default makes the rule t > after_depth.
        k (int): Buffer capacity.

    Returns:
        HitBuffer: Hits sorted by (depth, id), one per primitive. Fewer than k entries
        means no further hits exist.
    """
    buffer = HitBuffer(k=k)
    if not bvh.node_min:
        return buffer
    o = tuple(float(c) for c in ray.origin)
    d = tuple(float(c) for c in ray.direction)
    inv = tuple(1.0 / c if c != 0.0 else None for c in d)
    lower = max(float(after_depth), float(ray.t_min))
    cursor = (float(after_depth), int(after_id))
    tol = 1e-9 * (1.0 + abs(lower))

    keys: list[tuple[float, int]] = []
    seen: set[int] = set()
    stack = [0]
    while stack:
        node = stack.pop()
        span = _slab(bvh.node_min[node], bvh.node_max[node], o, inv)
        if span is None or span[1] < lower - tol:
            continue
        if len(keys) == k and span[0] > keys[-1][0] + 1e-9 * (1.0 + abs(keys[-1][0])):
            continue
        left = bvh.node_left[node]
        if left >= 0:
            right = bvh.node_right[node]
            near_l = _slab(bvh.node_min[left], bvh.node_max[left], o, inv)
            near_r = _slab(bvh.node_min[right], bvh.node_max[right], o, inv)
            if near_l is not None and near_r is not None and near_r[0] < near_l[0]:
                stack.append(left)
                stack.append(right)
            else:
                stack.append(right)
                stack.append(left)
            continue
        start = bvh.node_start[node]
        for v0, e1, e2, pid in bvh._leaf_tris[start:start + bvh.node_count[node]]:
            if pid in seen:
                continue
            if not _triangle_hit(o, d, v0, e1, e2):
                continue
            t = _plane_depth(bvh.planes[pid], o, d)
            if t is None or t <= ray.t_min:
                continue
            key = (t, pid)
            if key <= cursor:
                continue
            if len(keys) == k and key >= keys[-1]:
                continue
            bisect.insort(keys, key)
            seen.add(pid)
            if len(keys) > k:
                seen.discard(keys.pop()[1])

    buffer.depths = [t for t, _ in keys]
    buffer.ids = [pid for _, pid in keys]
    return buffer


def iterate_hits(bvh: Bvh, ray: Ray, k: int = 16) -> Iterator[tuple[int, float]]:
    """Yields (primitive id, depth) over all hits in (depth, id) order, one chunk at a time."""
    after_depth, after_id = ray.t_min, NO_ID
    while True:
        chunk = next_chunk(bvh, ray, after_depth, after_id, k)
        yield from zip(chunk.ids, chunk.depths)
        if not chunk.full:
            return
        after_depth, after_id = chunk.depths[-1], chunk.ids[-1]


def all_hits(bvh: Bvh, ray: Ray) -> list[tuple[int, float]]:
    """Intersects every triangle without traversal; returns globally sorted (id, depth) pairs."""
    o = tuple(float(c) for c in ray.origin)
    d = tuple(float(c) for c in ray.direction)
    found: dict[int, float] = {}
    for v0, e1, e2, pid in bvh._leaf_tris:
        if pid in found or not _triangle_hit(o, d, v0, e1, e2):
            continue
        t = _plane_depth(bvh.planes[pid], o, d)
        if t is not None and t > ray.t_min:
            found[pid] = t
    return [(pid, t) for t, pid in sorted((t, pid) for pid, t in found.items())]


@dataclass
class HitState:
    """Per-hit quantities shared by the forward integrator and the backward replay."""
    pid: int
    depth: float
    position: np.ndarray
    u: float
    v: float
    gaussian: float
    alpha: float
    clamped: bool
    color: np.ndarray
    normal_sign: float


def evaluate_hit(surfels: SurfelTable, pid: int, depth: float, ray: Ray, opts: TraceOptions) -> Optional[HitState]:
    """
    Evaluates one surfel at its plane hit, or returns None when the hit is skipped.
    """
    x = ray.origin + depth * ray.direction
    rot = surfels.rotations[pid]
    offset = x - surfels.centers[pid]
    u = float(rot[:, 0] @ offset) / surfels.scales[pid, 0]
    v = float(rot[:, 1] @ offset) / surfels.scales[pid, 1]
    gaussian = math.exp(-0.5 * (u * u + v * v))
    alpha = float(surfels.opacity[pid]) * gaussian
    if alpha < opts.alpha_min:
        return None
    clamped = alpha > opts.alpha_max
    if clamped:
        alpha = opts.alpha_max
    sign = -1.0 if float(rot[:, 2] @ ray.direction) > 0 else 1.0
    return HitState(
        pid=pid, depth=depth, position=x, u=u, v=v, gaussian=gaussian, alpha=alpha, clamped=clamped,
        color=eval_sh_unchecked(surfels.sh_coeffs[pid], ray.direction), normal_sign=sign,
    )


def integrate_hits(surfels: SurfelTable, ray: Ray, hits: Iterable[tuple[int, float]],
                   opts: TraceOptions, generation: int = 0) -> RaySample:
    """
    Front-to-back alpha compositing over an ordered hit stream.

    Args:
        surfels (SurfelTable): Activated surfel attributes.
        ray (Ray): The traced ray.
        hits (Iterable[tuple[int, float]]): (primitive id, depth) in ascending order.
        opts (TraceOptions): Skip/clamp/termination thresholds.
        generation (int): Stamp copied into the sample.

    Returns:
        RaySample: Composited color, normal, position, depth and blend weight.
    """
    color = np.zeros(3)
    normal = np.zeros(3)
    position = np.zeros(3)
    depth = 0.0
    blend = 0.0
    transmittance = 1.0
    visited = [] if opts.record_hits else None
    for pid, t in hits:
        hit = evaluate_hit(surfels, pid, t, ray, opts)
        if hit is None:
            continue
        weight = transmittance * hit.alpha
        color += weight * hit.color
        normal += weight * hit.normal_sign * surfels.rotations[pid][:, 2]
        position += weight * hit.position
        depth += weight * t
        if surfels.blend is not None:
            blend += weight * float(surfels.blend[pid])
        transmittance *= 1.0 - hit.alpha
        if visited is not None:
            visited.append((pid, t))
        if transmittance < opts.termination:
            break
    return RaySample(
        color=color, transmittance=transmittance, depth=depth, normal=normal,
        position=position, blend=blend, generation=generation, hits=visited,
    )


def _check_generation(bvh: Bvh, gset: GaussianSet):
    if bvh.generation != gset.generation:
        raise StaleStateError(
            f"BVH was built for generation {bvh.generation} but the {gset.kind} set is at generation {gset.generation}"
        )
    if bvh.surfels is None:
        raise ValueError("BVH has no surfel table attached; build it with build_set_bvh")


def integrate_ray(bvh: Bvh, gset: GaussianSet, ray: Ray, opts: Optional[TraceOptions] = None) -> RaySample:
    opts = opts or TraceOptions()
    _check_generation(bvh, gset)
    return integrate_hits(bvh.surfels, ray, iterate_hits(bvh, ray, opts.k), opts, bvh.generation)


def render_brute_force(gset: GaussianSet, ray: Ray, opts: Optional[TraceOptions] = None) -> RaySample:
    """Reference renderer: intersects every proxy, sorts globally, then integrates."""
    opts = opts or TraceOptions()
    if not len(gset):
        return RaySample.background(gset.generation)
    surfels = SurfelTable.from_set(gset)
    vertices = gset.proxy_vertices()
    planes = {}
    for pid, tris in enumerate(vertices):
        v1, v2, v3 = tris[0]
        normal = np.cross(v2 - v1, v3 - v1)
        norm = np.linalg.norm(normal)
        planes[pid] = (tuple(float(c) for c in v1), tuple(float(c) for c in (normal / norm if norm > 0 else normal)))
    o = tuple(float(c) for c in ray.origin)
    d = tuple(float(c) for c in ray.direction)
    found = []
    for pid, tris in enumerate(vertices):
        if not any(_triangle_hit(o, d, *_edge_form(tri, pid)[:3]) for tri in tris):
            continue
        t = _plane_depth(planes[pid], o, d)
        if t is not None and t > ray.t_min:
            found.append((t, pid))
    found.sort()
    return integrate_hits(surfels, ray, [(pid, t) for t, pid in found], opts, gset.generation)


def partition_blocks(count: int, workers: int) -> list[range]:
    """Splits [0, count) into at most `workers` contiguous blocks of near-equal size."""
    workers = max(1, min(workers, count))
    bounds = np.linspace(0, count, workers + 1).astype(int)
    return [range(bounds[i], bounds[i + 1]) for i in range(workers) if bounds[i + 1] > bounds[i]]


def _render_block(bvh: Bvh, rays: list[Ray], opts: TraceOptions) -> list[RaySample]:
    return [integrate_hits(bvh.surfels, ray, iterate_hits(bvh, ray, opts.k), opts, bvh.generation) for ray in rays]


def render_rays(bvh: Bvh, gset: GaussianSet, rays: list[Ray], opts: Optional[TraceOptions] = None) -> list[RaySample]:
    """
    Integrates a batch of rays; output order matches input order for any worker count.

    With `opts.threads > 1` each contiguous block of rays is traced in its own worker
    process and the blocks are concatenated in order.
    """
    opts = opts or TraceOptions()
    _check_generation(bvh, gset)
    blocks = partition_blocks(len(rays), opts.threads)
    if opts.threads <= 1 or len(blocks) <= 1:
        return _render_block(bvh, rays, opts)
    samples: list[RaySample] = []
    with ProcessPoolExecutor(max_workers=len(blocks)) as pool:
        futures = [pool.submit(_render_block, bvh, rays[block.start:block.stop], opts) for block in blocks]
        for future in futures:
            samples.extend(future.result())
    return samples

import itertools
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from utils.math_utils import inverse_sigmoid, quaternion_to_matrix, sigmoid

PROXY_RADIUS = 3.0
SH_DEGREE = 2
SH_COEFFS = (SH_DEGREE + 1) ** 2

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)

SetKind = Literal["base", "env"]

_generations = itertools.count(1)


def next_generation() -> int:
    return next(_generations)


@dataclass(frozen=True)
class Gaussian2D:
    """
    A single 2D Gaussian surfel in raw (pre-activation) parameters.

    Attributes:
        center (np.ndarray): World-space center p_k, shape (3,).
        rotation (np.ndarray): Quaternion (w, x, y, z); matrix columns are t_u, t_v, normal.
        log_scales (np.ndarray): Raw scales, shape (2,); activated with exp.
        raw_opacity (float): Raw opacity; activated with sigmoid.
        sh_coeffs (np.ndarray): Degree-2 SH coefficients, shape (9, 3).
        raw_blend (float, optional): Raw blend weight, base-set surfels only.
    """
    center: np.ndarray
    rotation: np.ndarray
    log_scales: np.ndarray
    raw_opacity: float
    sh_coeffs: np.ndarray
    raw_blend: Optional[float] = None

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.raw_opacity))

    @property
    def blend(self) -> Optional[float]:
        return None if self.raw_blend is None else float(sigmoid(self.raw_blend))

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quaternion_to_matrix(self.rotation)


@dataclass(frozen=True)
class TangentTransform:
    """4x4 map from local tangent-plane coordinates (u, v, 0, 1) to world space."""
    H: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return self.H[:3, 3]


@dataclass(frozen=True)
class TriangleProxy:
    """
    Two world-space triangles covering a surfel's 3-sigma square.

    Attributes:
        vertices (np.ndarray): Shape (2, 3, 3): triangle, vertex, xyz.
        primitive_id (int): Index of the surfel in its GaussianSet.
    """
    vertices: np.ndarray
    primitive_id: int


def build_transform(g: Gaussian2D) -> TangentTransform:
    rot = g.rotation_matrix
    scales = g.scales
    H = np.zeros((4, 4))
    H[:3, 0] = scales[0] * rot[:, 0]
    H[:3, 1] = scales[1] * rot[:, 1]
    H[:3, 3] = g.center
    H[3, 3] = 1.0
    return TangentTransform(H=H)


def invert_to_local(t: TangentTransform, x: np.ndarray) -> np.ndarray:
    """
    Maps a world point into the surfel's local frame.

    Args:
        t (TangentTransform): Transform built by build_transform.
        x (np.ndarray): World point, shape (3,).

    Returns:
        np.ndarray: (u, v, w) where u, v are in units of the scales and w is the signed
        distance from the surfel plane along its normal.
    """
    axis_u = t.H[:3, 0]
    axis_v = t.H[:3, 1]
    s_u = np.linalg.norm(axis_u)
    s_v = np.linalg.norm(axis_v)
    t_u = axis_u / s_u
    t_v = axis_v / s_v
    offset = np.asarray(x, dtype=float) - t.center
    return np.array([
        np.dot(t_u, offset) / s_u,
        np.dot(t_v, offset) / s_v,
        np.dot(np.cross(t_u, t_v), offset),
    ])


def gaussian_value(u: float, v: float) -> float:
    return float(np.exp(-0.5 * (u * u + v * v)))


def sh_basis(direction: np.ndarray) -> np.ndarray:
    """
    Real SH basis values for degrees 0-2 at the given direction components.

    Args:
        direction (np.ndarray): Direction (x, y, z); used as given, no normalization.

    Returns:
        np.ndarray: The 9 basis values.
    """
    x, y, z = direction
    return np.array([
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * z * z - x * x - y * y),
        SH_C2[3] * x * z,
        SH_C2[4] * (x * x - y * y),
    ])


def sh_basis_grad(direction: np.ndarray) -> np.ndarray:
    """Jacobian of sh_basis with respect to the direction components, shape (9, 3)."""
    x, y, z = direction
    return np.array([
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [SH_C2[0] * y, SH_C2[0] * x, 0.0],
        [0.0, SH_C2[1] * z, SH_C2[1] * y],
        [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z],
        [SH_C2[3] * z, 0.0, SH_C2[3] * x],
        [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0],
    ])


def eval_sh_unchecked(sh_coeffs: np.ndarray, direction: np.ndarray) -> np.ndarray:
    raw = sh_basis(direction) @ np.reshape(sh_coeffs, (SH_COEFFS, 3)) + 0.5
    return np.maximum(raw, 0.0)


def eval_sh(sh_coeffs: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """
    Evaluates view-dependent color from degree-2 SH coefficients.

    Args:
        sh_coeffs (np.ndarray): 27 coefficients, reshaped to (9, 3) coefficient-major.
        direction (np.ndarray): Unit view direction.

    Returns:
        np.ndarray: RGB color, offset by 0.5 and clamped at zero from below.

    Raises:
        ValueError: If the direction is not unit length within 1e-6.
    """
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError(f"SH direction must be unit length, got norm {np.linalg.norm(direction):.8f}")
    return eval_sh_unchecked(sh_coeffs, direction)


def surfel_normal(g: Gaussian2D, view_dir: np.ndarray) -> np.ndarray:
    normal = g.rotation_matrix[:, 2]
    if np.dot(normal, view_dir) > 0:
        return -normal
    return normal


def proxy_corners(centers: np.ndarray, rotations: np.ndarray, scales: np.ndarray,
                  radius: float = PROXY_RADIUS) -> np.ndarray:
    """
    World positions of the four proxy corners (-r,-r), (r,-r), (r,r), (-r,r) per surfel.

    Returns:
        np.ndarray: Shape (N, 4, 3).
    """
    signs = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]) * radius
    axis_u = rotations[:, :, 0] * scales[:, 0:1]
    axis_v = rotations[:, :, 1] * scales[:, 1:2]
    return (centers[:, None, :]
            + signs[None, :, 0:1] * axis_u[:, None, :]
            + signs[None, :, 1:2] * axis_v[:, None, :])


def build_proxy(g: Gaussian2D, primitive_id: int) -> TriangleProxy:
    corners = proxy_corners(g.center[None], g.rotation_matrix[None], g.scales[None])[0]
    return TriangleProxy(vertices=_corners_to_triangles(corners), primitive_id=primitive_id)


def _corners_to_triangles(corners: np.ndarray) -> np.ndarray:
    return np.stack([corners[[0, 1, 2]], corners[[0, 2, 3]]])


@dataclass
class GaussianSet:
    """
    Array-of-attributes collection of surfels with their raw optimizable parameters.

    Attributes:
        kind (str): "base" (carries blend weights) or "env".
        centers (np.ndarray): (N, 3) centers.
        rotations (np.ndarray): (N, 4) quaternions (w, x, y, z).
        log_scales (np.ndarray): (N, 2) raw scales.
        raw_opacity (np.ndarray): (N,) raw opacities.
        sh_coeffs (np.ndarray): (N, 9, 3) SH coefficients.
        raw_blend (np.ndarray, optional): (N,) raw blend weights, base sets only.
        generation (int): Process-unique stamp, refreshed by touch() after each mutation.
    """
    kind: SetKind
    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    raw_opacity: np.ndarray
    sh_coeffs: np.ndarray
    raw_blend: Optional[np.ndarray] = None
    generation: int = field(default_factory=next_generation)

    def __post_init__(self):
        if self.kind not in ("base", "env"):
            raise ValueError(f"Unknown set kind '{self.kind}', expected 'base' or 'env'")
        if self.kind == "base" and self.raw_blend is None:
            self.raw_blend = np.zeros(len(self.centers))
        if self.kind == "env":
            self.raw_blend = None

    def __len__(self) -> int:
        return len(self.centers)

    @classmethod
    def empty(cls, kind: SetKind) -> "GaussianSet":
        return cls(
            kind=kind,
            centers=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            log_scales=np.zeros((0, 2)),
            raw_opacity=np.zeros(0),
            sh_coeffs=np.zeros((0, SH_COEFFS, 3)),
            raw_blend=np.zeros(0) if kind == "base" else None,
        )

    @classmethod
    def from_surfels(cls, kind: SetKind, surfels: list[Gaussian2D]) -> "GaussianSet":
        if not surfels:
            return cls.empty(kind)
        return cls(
            kind=kind,
            centers=np.array([g.center for g in surfels], dtype=float),
            rotations=np.array([g.rotation for g in surfels], dtype=float),
            log_scales=np.array([g.log_scales for g in surfels], dtype=float),
            raw_opacity=np.array([g.raw_opacity for g in surfels], dtype=float),
            sh_coeffs=np.array([np.reshape(g.sh_coeffs, (SH_COEFFS, 3)) for g in surfels], dtype=float),
            raw_blend=np.array([g.raw_blend or 0.0 for g in surfels], dtype=float) if kind == "base" else None,
        )

    def surfel(self, index: int) -> Gaussian2D:
        return Gaussian2D(
            center=self.centers[index].copy(),
            rotation=self.rotations[index].copy(),
            log_scales=self.log_scales[index].copy(),
            raw_opacity=float(self.raw_opacity[index]),
            sh_coeffs=self.sh_coeffs[index].copy(),
            raw_blend=None if self.raw_blend is None else float(self.raw_blend[index]),
        )

    def parameters(self) -> dict[str, np.ndarray]:
        """Raw optimizable arrays keyed by parameter class (views, not copies)."""
        params = {
            "centers": self.centers,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "raw_opacity": self.raw_opacity,
            "sh_coeffs": self.sh_coeffs,
        }
        if self.raw_blend is not None:
            params["raw_blend"] = self.raw_blend
        return params

    def touch(self):
        self.generation = next_generation()

    def normalize_rotations(self):
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def select(self, index: np.ndarray) -> "GaussianSet":
        return GaussianSet(
            kind=self.kind,
            centers=self.centers[index].copy(),
            rotations=self.rotations[index].copy(),
            log_scales=self.log_scales[index].copy(),
            raw_opacity=self.raw_opacity[index].copy(),
            sh_coeffs=self.sh_coeffs[index].copy(),
            raw_blend=None if self.raw_blend is None else self.raw_blend[index].copy(),
        )

    def concat(self, other: "GaussianSet") -> "GaussianSet":
        if other.kind != self.kind:
            raise ValueError(f"Cannot concatenate a '{other.kind}' set onto a '{self.kind}' set")
        return GaussianSet(
            kind=self.kind,
            centers=np.concatenate([self.centers, other.centers]),
            rotations=np.concatenate([self.rotations, other.rotations]),
            log_scales=np.concatenate([self.log_scales, other.log_scales]),
            raw_opacity=np.concatenate([self.raw_opacity, other.raw_opacity]),
            sh_coeffs=np.concatenate([self.sh_coeffs, other.sh_coeffs]),
            raw_blend=None if self.raw_blend is None else np.concatenate([self.raw_blend, other.raw_blend]),
        )

    def copy(self) -> "GaussianSet":
        return self.select(np.arange(len(self)))

    def rotation_matrices(self) -> np.ndarray:
        return quaternion_to_matrix(self.rotations) if len(self) else np.zeros((0, 3, 3))

    def proxy_vertices(self) -> np.ndarray:
        """Triangle-proxy vertices for every surfel, shape (N, 2, 3, 3)."""
        if not len(self):
            return np.zeros((0, 2, 3, 3))
        corners = proxy_corners(self.centers, self.rotation_matrices(), np.exp(self.log_scales))
        return np.stack([corners[:, [0, 1, 2]], corners[:, [0, 2, 3]]], axis=1)

    def proxies(self) -> list[TriangleProxy]:
        return [TriangleProxy(vertices=tris, primitive_id=i) for i, tris in enumerate(self.proxy_vertices())]


def make_set(kind: SetKind, centers, rotations, scales, opacity, sh_coeffs, blend=None) -> GaussianSet:
    """
    Builds a GaussianSet from activated values (scales, opacity, blend in their natural ranges).
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    count = len(centers)
    rotations = np.asarray(rotations, dtype=float).reshape(count, 4)
    scales = np.broadcast_to(np.asarray(scales, dtype=float), (count, 2))
    opacity = np.broadcast_to(np.asarray(opacity, dtype=float), (count,))
    sh_coeffs = np.broadcast_to(np.asarray(sh_coeffs, dtype=float), (count, SH_COEFFS, 3))
    raw_blend = None
    if kind == "base":
        blend = 0.5 if blend is None else blend
        raw_blend = inverse_sigmoid(np.broadcast_to(np.asarray(blend, dtype=float), (count,))).copy()
    return GaussianSet(
        kind=kind,
        centers=centers.copy(),
        rotations=rotations / np.linalg.norm(rotations, axis=1, keepdims=True),
        log_scales=np.log(scales).copy(),
        raw_opacity=inverse_sigmoid(opacity).copy(),
        sh_coeffs=sh_coeffs.copy(),
        raw_blend=raw_blend,
    )


def rgb_to_dc(rgb) -> np.ndarray:
    """SH coefficient array whose DC term reproduces the given color in every direction."""
    sh = np.zeros((SH_COEFFS, 3))
    sh[0] = (np.asarray(rgb, dtype=float) - 0.5) / SH_C0
    return sh

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from cameras import CameraModel, camera_rays, look_at
from compose import ComposeOptions, compose_frame
from primitives import SH_C0, SH_COEFFS, GaussianSet, make_set
from scene_io import save_scene
from tracer import Ray, TraceOptions, build_set_bvh, render_rays
from utils.console_utils import log_info

SYNTHETIC_SCENES = ("mirror_wall", "sphere_probe", "diffuse_box")
MIRROR_BLEND_LOGIT = 20.0
DIFFUSE_BLEND_LOGIT = -20.0
OPAQUE = 0.99


def frames_from_normals(normals: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions (w, x, y, z) whose rotation maps +z onto each unit normal."""
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    helper = np.where(np.abs(normals[:, 1:2]) < 0.9, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(helper, normals)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normals, t1)
    matrices = np.stack([t1, t2, normals], axis=-1)
    return Rotation.from_matrix(matrices).as_quat()[:, [3, 0, 1, 2]]


def _dc(colors: np.ndarray) -> np.ndarray:
    sh = np.zeros((len(colors), SH_COEFFS, 3))
    sh[:, 0] = (np.asarray(colors, dtype=float) - 0.5) / SH_C0
    return sh


def _plane_grid(extent: float, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    axis = np.arange(-extent, extent + 0.5 * spacing, spacing)
    u, v = np.meshgrid(axis, axis, indexing="ij")
    return u.ravel(), v.ravel()


def _surfels(kind: str, centers: np.ndarray, normals: np.ndarray, scale: float, colors: np.ndarray,
             blend_logit: Optional[float] = None) -> GaussianSet:
    gset = make_set(kind, centers, frames_from_normals(normals), scale, OPAQUE, _dc(colors))
    if blend_logit is not None:
        gset.raw_blend[:] = blend_logit
    return gset


@dataclass
class SyntheticScene:
    """
    A procedurally generated scene with its ground truth.

    Attributes:
        name (str): Generator name.
        seed (int): Seed the scene was generated from.
        cameras (list[CameraModel]): Views orbiting the subject.
        base (GaussianSet): Ground-truth base set.
        env (GaussianSet): Ground-truth environment set (empty for diffuse_box).
        images (list[np.ndarray]): Ground-truth renders, one per camera.
        mono_normals (list[np.ndarray]): Camera-frame normal maps of the ground truth, zero on background.
        points (np.ndarray): Sparse points sampled from both sets.
        point_colors (np.ndarray): Their colors in [0, 1].
        mirror_plane (tuple, optional): (point, unit normal) of the mirror for mirror_wall.
    """
    name: str
    seed: int
    cameras: list[CameraModel]
    base: GaussianSet
    env: GaussianSet
    images: list[np.ndarray]
    mono_normals: list[np.ndarray]
    points: np.ndarray
    point_colors: np.ndarray
    mirror_plane: Optional[tuple[np.ndarray, np.ndarray]] = None

    def mirror_reference(self, camera: CameraModel, opts: Optional[TraceOptions] = None) -> np.ndarray:
        """
        Environment seen through the ideal mirror: the env set rendered from the camera
        reflected across the mirror plane. Only meaningful over mirror pixels.

        Raises:
            ValueError: If the scene has no mirror plane.
        """
        if self.mirror_plane is None:
            raise ValueError(f"Synthetic scene '{self.name}' has no mirror plane")
        point, normal = self.mirror_plane
        origins, directions = camera_rays(camera)
        origins = origins - 2.0 * ((origins - point) @ normal)[:, None] * normal
        directions = directions - 2.0 * (directions @ normal)[:, None] * normal
        rays = [Ray(origins[i], directions[i]) for i in range(len(origins))]
        samples = render_rays(build_set_bvh(self.env), self.env, rays, opts or TraceOptions())
        return np.array([s.color for s in samples]).reshape(camera.shape + (3,))

    def save(self, out_dir: str, include_sets: bool = False) -> str:
        """
        Writes a ready-to-train scene (cameras, images, mono normals, sparse points).

        Args:
            out_dir (str): Output directory.
            include_sets (bool): Also write the ground-truth base/env PLYs into the manifest.

        Returns:
            str: Path of scene.json.
        """
        env = self.env if include_sets and len(self.env) else None
        path = save_scene(out_dir, self.cameras, self.images, base=self.base if include_sets else None, env=env,
                          mono_normals=self.mono_normals, points=self.points, point_colors=self.point_colors)
        log_info(f"Synthetic scene '{self.name}' (seed {self.seed}) written to {path}")
        return path


def _mirror_wall(rng: np.random.Generator, n_views: int, width: int, height: int, env_distance: float):
    u, v = _plane_grid(1.0, 0.1)
    mirror_centers = np.stack([u, v, np.zeros_like(u)], axis=1)
    base = _surfels("base", mirror_centers, np.tile([0.0, 0.0, 1.0], (len(u), 1)), 0.1,
                    np.full((len(u), 3), 0.05), MIRROR_BLEND_LOGIT)

    u, v = _plane_grid(3.0, 0.25)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
    colors = 0.5 + 0.3 * np.stack([np.sin(0.9 * u + phase[0]), np.sin(0.7 * v + phase[1]),
                                   np.sin(0.5 * (u + v) + phase[2])], axis=1)
    wall_centers = np.stack([u, v, np.full_like(u, -env_distance)], axis=1)
    env = _surfels("env", wall_centers, np.tile([0.0, 0.0, 1.0], (len(u), 1)), 0.25, colors)

    cameras = []
    for i in range(n_views):
        angle = 2.0 * np.pi * i / n_views
        eye = (0.3 * np.cos(angle), 0.3 * np.sin(angle), -1.5)
        cameras.append(look_at(eye, (0.0, 0.0, 0.0), width=width, height=height, fov_degrees=40.0))
    plane = (np.zeros(3), np.array([0.0, 0.0, 1.0]))
    return base, env, cameras, plane


def _sphere_probe(rng: np.random.Generator, n_views: int, width: int, height: int, env_distance: float):
    count = 400
    radius = 0.5
    # Fibonacci lattice with a seeded twist
    index = np.arange(count) + 0.5
    polar = np.arccos(1.0 - 2.0 * index / count)
    azimuth = np.pi * (1.0 + 5.0 ** 0.5) * index + rng.uniform(0.0, 2.0 * np.pi)
    normals = np.stack([np.sin(polar) * np.cos(azimuth), np.cos(polar), np.sin(polar) * np.sin(azimuth)], axis=1)
    scale = 0.6 * np.sqrt(4.0 * np.pi * radius ** 2 / count)
    base = _surfels("base", radius * normals, normals, scale, np.full((count, 3), 0.2), 3.0)

    ring = 48
    angle, height_y = np.meshgrid(np.linspace(0.0, 2.0 * np.pi, ring, endpoint=False), np.linspace(-1.0, 1.0, 9),
                                  indexing="ij")
    angle, height_y = angle.ravel(), height_y.ravel()
    outward = np.stack([np.cos(angle), np.zeros_like(angle), np.sin(angle)], axis=1)
    hue = angle[:, None] + np.array([0.0, 2.0, 4.0])
    colors = 0.5 + 0.4 * np.sin(hue)
    centers = env_distance * outward + np.stack([np.zeros_like(angle), height_y, np.zeros_like(angle)], axis=1)
    env = _surfels("env", centers, -outward, 0.3, colors)

    cameras = []
    for i in range(n_views):
        theta = 2.0 * np.pi * i / n_views
        eye = (2.0 * np.cos(theta), -0.3, 2.0 * np.sin(theta))
        cameras.append(look_at(eye, (0.0, 0.0, 0.0), width=width, height=height, fov_degrees=45.0))
    return base, env, cameras, None


def _diffuse_box(rng: np.random.Generator, n_views: int, width: int, height: int, env_distance: float):
    u, v = _plane_grid(1.0, 0.25)
    ones = np.ones_like(u)
    walls = [
        (np.stack([u, v, ones], axis=1), (0.0, 0.0, -1.0)),
        (np.stack([-ones, u, v], axis=1), (1.0, 0.0, 0.0)),
        (np.stack([ones, u, v], axis=1), (-1.0, 0.0, 0.0)),
        (np.stack([u, -ones, v], axis=1), (0.0, 1.0, 0.0)),
        (np.stack([u, ones, v], axis=1), (0.0, -1.0, 0.0)),
    ]
    palette = rng.uniform(0.15, 0.85, size=(len(walls), 2, 3))
    checker = (np.round(u / 0.25) + np.round(v / 0.25)).astype(int) % 2
    centers = np.concatenate([c for c, _ in walls])
    normals = np.concatenate([np.tile(n, (len(u), 1)) for _, n in walls])
    colors = np.concatenate([palette[i][checker] for i in range(len(walls))])
    base = _surfels("base", centers, normals, 0.15, colors, DIFFUSE_BLEND_LOGIT)

    cameras = []
    for i in range(n_views):
        angle = 2.0 * np.pi * i / n_views
        eye = (0.2 * np.cos(angle), 0.2 * np.sin(angle), -1.5)
        cameras.append(look_at(eye, (0.0, 0.0, 0.5), width=width, height=height, fov_degrees=50.0))
    return base, GaussianSet.empty("env"), cameras, None


GENERATORS = {
    "mirror_wall": _mirror_wall,
    "sphere_probe": _sphere_probe,
    "diffuse_box": _diffuse_box,
}


def _sample_points(rng: np.random.Generator, sets: list[GaussianSet]) -> tuple[np.ndarray, np.ndarray]:
    centers = np.concatenate([s.centers for s in sets if len(s)])
    colors = np.concatenate([s.sh_coeffs[:, 0] for s in sets if len(s)]) * SH_C0 + 0.5
    jitter = rng.normal(scale=0.01, size=centers.shape)
    return centers + jitter, np.clip(colors, 0.0, 1.0)


def make_synthetic(name: str, seed: int = 0, n_views: int = 4, width: int = 32, height: int = 32,
                   threads: int = 1, env_distance: float = 3.0) -> SyntheticScene:
    """
    Generates one of the procedural test scenes together with its ground-truth renders.

    Args:
        name (str): One of mirror_wall, sphere_probe, diffuse_box.
        seed (int): Seed for textures, orientations and point jitter.
        n_views (int): Number of orbiting cameras.
        width (int): Image width.
        height (int): Image height.
        threads (int): Worker processes for the ground-truth renders.
        env_distance (float): Distance of the environment emitters from the origin: the
            wall depth behind the mirror_wall camera, the ring radius of sphere_probe.
            diffuse_box has no environment and ignores it.

    Returns:
        SyntheticScene: Sets, cameras, rendered images and camera-frame normal maps.

    Raises:
        ValueError: If the name is unknown.
    """
    if name not in GENERATORS:
        raise ValueError(f"Unknown synthetic scene '{name}', expected one of {', '.join(SYNTHETIC_SCENES)}")
    if n_views < 1:
        raise ValueError(f"n_views must be at least 1, got {n_views}")
    if env_distance <= 0.0:
        raise ValueError(f"env_distance must be positive, got {env_distance}")
    rng = np.random.default_rng(seed)
    base, env, cameras, plane = GENERATORS[name](rng, n_views, width, height, env_distance)

    opts = ComposeOptions(trace=TraceOptions(threads=threads))
    images, normal_maps = [], []
    for camera in cameras:
        frame = compose_frame(base, env, camera, opts)
        images.append(np.clip(frame.image(), 0.0, 1.0))
        normal_maps.append(frame.gbuffer.image("normal") @ camera.rotation.T)

    points, point_colors = _sample_points(rng, [base, env])
    return SyntheticScene(name=name, seed=seed, cameras=cameras, base=base, env=env, images=images,
                          mono_normals=normal_maps, points=points, point_colors=point_colors, mirror_plane=plane)

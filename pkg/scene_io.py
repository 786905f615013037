import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement
from pydantic import BaseModel, ConfigDict, ValidationError, ValidationInfo, field_validator

from cameras import CameraModel, load_cameras, save_cameras
from errors import DataError, FormatError
from primitives import SH_COEFFS, GaussianSet

SET_KINDS = ("base", "env")
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# IHDR bit-depth byte: signature, chunk length, chunk type, width, height
PNG_BIT_DEPTH_OFFSET = 24
BASE_PROPERTIES = (
    ["x", "y", "z", "quat_w", "quat_x", "quat_y", "quat_z", "log_scale_u", "log_scale_v", "raw_opacity"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(3 * (SH_COEFFS - 1))]
)


def gaussian_properties(kind: str) -> list[str]:
    return BASE_PROPERTIES + (["raw_blend"] if kind == "base" else [])


def _sh_to_columns(sh_coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(N, 9, 3) -> f_dc (N, 3) and channel-major f_rest (N, 24)."""
    f_dc = sh_coeffs[:, 0, :]
    f_rest = np.transpose(sh_coeffs[:, 1:, :], (0, 2, 1)).reshape(len(sh_coeffs), -1)
    return f_dc, f_rest


def _columns_to_sh(f_dc: np.ndarray, f_rest: np.ndarray) -> np.ndarray:
    count = len(f_dc)
    sh = np.zeros((count, SH_COEFFS, 3))
    sh[:, 0, :] = f_dc
    sh[:, 1:, :] = np.transpose(f_rest.reshape(count, 3, SH_COEFFS - 1), (0, 2, 1))
    return sh


def save_gaussians(path: str, gset: GaussianSet):
    """
    Writes a GaussianSet as little-endian binary PLY with double-precision properties.
    The header carries a `set_kind base|env` comment; only base sets have raw_blend.
    """
    f_dc, f_rest = _sh_to_columns(gset.sh_coeffs)
    columns = [gset.centers, gset.rotations, gset.log_scales, gset.raw_opacity[:, None], f_dc, f_rest]
    if gset.kind == "base":
        columns.append(gset.raw_blend[:, None])
    values = np.concatenate(columns, axis=1) if len(gset) else np.zeros((0, len(gaussian_properties(gset.kind))))
    elements = np.empty(len(gset), dtype=[(name, "<f8") for name in gaussian_properties(gset.kind)])
    for index, name in enumerate(gaussian_properties(gset.kind)):
        elements[name] = values[:, index]
    ply = PlyData([PlyElement.describe(elements, "vertex")], text=False, byte_order="<",
                  comments=[f"set_kind {gset.kind}"])
    ply.write(path)


@dataclass
class PlyHeader:
    kind: str
    vertex_count: int
    properties: list[tuple[str, str]]
    header_bytes: int


def read_gaussian_header(path: str) -> PlyHeader:
    """
    Parses and checks the header of a Gaussian PLY file, including the payload length.

    Raises:
        FileNotFoundError: If the file does not exist.
        FormatError: With the byte offset of the first problem.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Gaussian file not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    offset = 0
    kind = None
    vertex_count = None
    properties = []
    lines = []
    while True:
        end = data.find(b"\n", offset)
        if end < 0:
            raise FormatError("header is not terminated by end_header", path, offset)
        try:
            line = data[offset:end].decode("ascii").strip()
        except UnicodeDecodeError as e:
            raise FormatError("header contains non-ASCII bytes", path, offset) from e
        lines.append((offset, line))
        offset = end + 1
        if line == "end_header":
            break

    if not lines or lines[0][1] != "ply":
        raise FormatError("missing 'ply' magic", path, 0)
    for line_offset, line in lines[1:-1]:
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1:] != ["binary_little_endian", "1.0"]:
                raise FormatError(f"unsupported format '{' '.join(tokens[1:])}'", path, line_offset)
        elif tokens[0] == "comment":
            if len(tokens) >= 2 and tokens[1] == "set_kind":
                if len(tokens) != 3 or tokens[2] not in SET_KINDS:
                    raise FormatError(f"unknown set_kind '{' '.join(tokens[2:])}'", path, line_offset)
                kind = tokens[2]
        elif tokens[0] == "element":
            if vertex_count is not None or len(tokens) != 3 or tokens[1] != "vertex":
                raise FormatError(f"unexpected element declaration '{line}'", path, line_offset)
            try:
                vertex_count = int(tokens[2])
            except ValueError as e:
                raise FormatError(f"invalid vertex count '{tokens[2]}'", path, line_offset) from e
        elif tokens[0] == "property":
            if len(tokens) != 3:
                raise FormatError(f"malformed property '{line}'", path, line_offset)
            properties.append((tokens[2], tokens[1]))
        else:
            raise FormatError(f"unexpected header line '{line}'", path, line_offset)

    if kind is None:
        raise FormatError("missing 'comment set_kind base|env'", path, 0)
    if vertex_count is None:
        raise FormatError("missing 'element vertex' declaration", path, 0)
    expected = gaussian_properties(kind)
    names = [name for name, _ in properties]
    if names != expected:
        raise FormatError(f"properties for a {kind} set must be {expected}, got {names}", path, lines[0][0])
    bad = [name for name, dtype in properties if dtype not in ("double", "float64")]
    if bad:
        raise FormatError(f"properties must be double precision, got {bad}", path, 0)

    payload = len(data) - offset
    stride = 8 * len(expected)
    if payload < vertex_count * stride:
        present = payload // stride
        raise FormatError(
            f"truncated payload: header declares {vertex_count} vertices but only {present} are present "
            f"({vertex_count - present} missing)",
            path, offset + present * stride,
        )
    return PlyHeader(kind=kind, vertex_count=vertex_count, properties=properties, header_bytes=offset)


def load_gaussians(path: str, kind: Optional[str] = None) -> GaussianSet:
    """
    Reads a Gaussian PLY file written by save_gaussians.

    Args:
        path (str): File path.
        kind (str, optional): Expected set kind; mismatch raises FormatError.

    Returns:
        GaussianSet: Attributes bit-identical to the saved ones.
    """
    header = read_gaussian_header(path)
    if kind is not None and header.kind != kind:
        raise FormatError(f"expected a {kind} set, file holds a {header.kind} set", path)
    vertex = PlyData.read(path)["vertex"]

    def column(name: str) -> np.ndarray:
        return np.asarray(vertex[name], dtype=np.float64)

    f_dc = np.stack([column(f"f_dc_{i}") for i in range(3)], axis=1)
    f_rest = np.stack([column(f"f_rest_{i}") for i in range(3 * (SH_COEFFS - 1))], axis=1)
    return GaussianSet(
        kind=header.kind,
        centers=np.stack([column("x"), column("y"), column("z")], axis=1),
        rotations=np.stack([column(f"quat_{c}") for c in "wxyz"], axis=1),
        log_scales=np.stack([column("log_scale_u"), column("log_scale_v")], axis=1),
        raw_opacity=column("raw_opacity"),
        sh_coeffs=_columns_to_sh(f_dc, f_rest),
        raw_blend=column("raw_blend") if header.kind == "base" else None,
    )


def save_points(path: str, points: np.ndarray, colors: Optional[np.ndarray] = None):
    dtype = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if colors is not None:
        dtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    elements = np.empty(len(points), dtype=dtype)
    for index, name in enumerate("xyz"):
        elements[name] = points[:, index]
    if colors is not None:
        rgb = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
        for index, name in enumerate(("red", "green", "blue")):
            elements[name] = rgb[:, index]
    PlyData([PlyElement.describe(elements, "vertex")], byte_order="<").write(path)


def load_points(path: str) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Reads a sparse point cloud PLY (x, y, z and optional red, green, blue).

    Returns:
        tuple[np.ndarray, np.ndarray | None]: (N, 3) points and (N, 3) colors in [0, 1].
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Point file not found: {path}")
    try:
        vertex = PlyData.read(path)["vertex"]
    except Exception as e:
        raise FormatError(f"unreadable point cloud: {e}", path) from e
    names = [p.name for p in vertex.properties]
    if not {"x", "y", "z"} <= set(names):
        raise FormatError("point cloud lacks x, y, z properties", path)
    points = np.stack([np.asarray(vertex[c], dtype=float) for c in "xyz"], axis=1)
    colors = None
    if {"red", "green", "blue"} <= set(names):
        colors = np.stack([np.asarray(vertex[c], dtype=float) for c in ("red", "green", "blue")], axis=1) / 255.0
    return points, colors


def load_image(path: str) -> np.ndarray:
    """
    Loads an 8-bit PNG into [0, 1] (values left in the stored encoding) or a PFM exactly.

    Returns:
        np.ndarray: (H, W, 3) float image; single-channel PFMs load as (H, W).

    Raises:
        FormatError: For unsupported bit depths or malformed files.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Image not found: {path}")
    if path.lower().endswith(".pfm"):
        return read_pfm(path)
    with open(path, "rb") as f:
        head = f.read(PNG_BIT_DEPTH_OFFSET + 1)
    if head[:8] == PNG_SIGNATURE and len(head) > PNG_BIT_DEPTH_OFFSET and head[PNG_BIT_DEPTH_OFFSET] != 8:
        raise FormatError(f"unsupported bit depth {head[PNG_BIT_DEPTH_OFFSET]}; only 8-bit PNG is accepted",
                          path, PNG_BIT_DEPTH_OFFSET)
    with Image.open(path) as image:
        if image.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
            raise FormatError(f"unsupported image mode {image.mode}; only 8-bit images are accepted", path)
        image = image.convert("RGB")
        return np.asarray(image, dtype=np.float64) / 255.0


def save_image(path: str, image: np.ndarray):
    """Writes PNG (clipped and rounded to 8 bits) or PFM (float32) based on the extension."""
    image = np.asarray(image)
    if path.lower().endswith(".pfm"):
        write_pfm(path, image)
        return
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    data = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def save_normal_map(path: str, normals: np.ndarray):
    if path.lower().endswith(".pfm"):
        write_pfm(path, normals)
    else:
        save_image(path, (np.asarray(normals) + 1.0) / 2.0)


def load_normal_map(path: str) -> np.ndarray:
    """
    Loads a normal map; PNG values are decoded from (n + 1) / 2 and renormalized, with
    exact mid-grey (the encoding of a zero normal) kept at zero.
    """
    values = load_image(path)
    if path.lower().endswith(".pfm"):
        return values
    normals = values * 2.0 - 1.0
    norm = np.linalg.norm(normals, axis=-1, keepdims=True)
    return np.divide(normals, norm, out=np.zeros_like(normals), where=norm > 1e-2)


def write_pfm(path: str, image: np.ndarray):
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"PF"
    elif image.ndim == 2:
        magic = b"Pf"
    else:
        raise ValueError(f"PFM needs an (H, W) or (H, W, 3) array, got {image.shape}")
    height, width = image.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{width} {height}\n".encode("ascii") + b"-1.0\n")
        # PFM rows run bottom to top
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    lines = []
    offset = 0
    for _ in range(3):
        end = data.find(b"\n", offset)
        if end < 0:
            raise FormatError("truncated PFM header", path, offset)
        lines.append(data[offset:end].decode("ascii", errors="replace").strip())
        offset = end + 1
    if lines[0] not in ("PF", "Pf"):
        raise FormatError(f"bad PFM magic '{lines[0]}'", path, 0)
    try:
        width, height = (int(v) for v in lines[1].split())
        scale = float(lines[2])
    except ValueError as e:
        raise FormatError("malformed PFM dimensions or scale", path, len(lines[0]) + 1) from e
    channels = 3 if lines[0] == "PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    expected = width * height * channels * 4
    if len(data) - offset < expected:
        raise FormatError(f"truncated PFM payload: expected {expected} bytes, found {len(data) - offset}",
                          path, len(data))
    values = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=offset)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return values.reshape(shape)[::-1].astype(np.float32)


class SceneManifest(BaseModel):
    """scene.json: paths are relative to the manifest's directory."""
    model_config = ConfigDict(extra="forbid")

    cameras: str
    images: list[str] = []
    base: Optional[str] = None
    env: Optional[str] = None
    mono_normals: Optional[list[str]] = None
    points: Optional[str] = None

    @field_validator("cameras", "base", "env", "points")
    @classmethod
    def validate_file(cls, v: Optional[str], info: ValidationInfo) -> Optional[str]:
        if v is None:
            return v
        root = (info.context or {}).get("root", ".")
        file_path = os.path.join(root, v)
        if not os.path.isfile(file_path):
            raise ValueError(f"Invalid {info.field_name}: {v} does not exist at {file_path}")
        return v

    @field_validator("images", "mono_normals")
    @classmethod
    def validate_files(cls, v: Optional[list[str]], info: ValidationInfo) -> Optional[list[str]]:
        if v is None:
            return v
        root = (info.context or {}).get("root", ".")
        for name in v:
            file_path = os.path.join(root, name)
            if not os.path.isfile(file_path):
                raise ValueError(f"Invalid {info.field_name} entry: {name} does not exist at {file_path}")
        return v


@dataclass
class SceneBundle:
    """
    A loaded scene: Gaussian sets, cameras and the paths of per-view assets.

    Attributes:
        root (str): Directory of scene.json; asset paths are absolute.
        cameras (list[CameraModel]): One per view.
        image_paths (list[str]): Ground-truth images, one per camera.
        base (GaussianSet, optional): Base set.
        env (GaussianSet, optional): Environment set.
        mono_normal_paths (list[str], optional): Camera-frame monocular normal maps.
        points_path (str, optional): Sparse point cloud.
    """
    root: str
    cameras: list[CameraModel]
    image_paths: list[str] = field(default_factory=list)
    base: Optional[GaussianSet] = None
    env: Optional[GaussianSet] = None
    mono_normal_paths: Optional[list[str]] = None
    points_path: Optional[str] = None

    def load_images(self) -> list[np.ndarray]:
        images = [load_image(p) for p in self.image_paths]
        for index, (image, camera) in enumerate(zip(images, self.cameras)):
            if image.shape[:2] != camera.shape:
                raise DataError(f"image {self.image_paths[index]} is {image.shape[:2]}, camera {index} expects {camera.shape}")
        return images

    def load_mono_normals(self) -> Optional[list[np.ndarray]]:
        if self.mono_normal_paths is None:
            return None
        return [load_normal_map(p) for p in self.mono_normal_paths]

    def load_points(self) -> tuple[np.ndarray, Optional[np.ndarray]]:
        if self.points_path is None:
            raise DataError(f"scene at {self.root} has no sparse point cloud")
        return load_points(self.points_path)


def load_scene(path: str) -> SceneBundle:
    """
    Loads scene.json and everything it references.

    Raises:
        FileNotFoundError: If scene.json is missing.
        FormatError: If the manifest is malformed or references missing files.
        DataError: If the camera and image counts differ.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Scene manifest not found: {path}")
    root = os.path.dirname(os.path.abspath(path))
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", path, e.pos) from e
    try:
        manifest = SceneManifest.model_validate(raw, context={"root": root})
    except ValidationError as e:
        raise FormatError("; ".join(err["msg"] for err in e.errors()), path) from e

    def resolve(name: str) -> str:
        return os.path.join(root, name)

    cameras = load_cameras(resolve(manifest.cameras))
    if manifest.images and len(manifest.images) != len(cameras):
        raise DataError(f"{path}: {len(cameras)} cameras but {len(manifest.images)} images")
    if manifest.mono_normals is not None and len(manifest.mono_normals) != len(cameras):
        raise DataError(f"{path}: {len(cameras)} cameras but {len(manifest.mono_normals)} mono normal maps")
    return SceneBundle(
        root=root,
        cameras=cameras,
        image_paths=[resolve(p) for p in manifest.images],
        base=load_gaussians(resolve(manifest.base), "base") if manifest.base else None,
        env=load_gaussians(resolve(manifest.env), "env") if manifest.env else None,
        mono_normal_paths=[resolve(p) for p in manifest.mono_normals] if manifest.mono_normals is not None else None,
        points_path=resolve(manifest.points) if manifest.points else None,
    )


def save_scene(out_dir: str, cameras: list[CameraModel], images: Optional[list[np.ndarray]] = None,
               base: Optional[GaussianSet] = None, env: Optional[GaussianSet] = None,
               mono_normals: Optional[list[np.ndarray]] = None, points: Optional[np.ndarray] = None,
               point_colors: Optional[np.ndarray] = None) -> str:
    """
    Writes a scene directory (scene.json, cameras.json, images/, normals/, PLYs).

    Returns:
        str: Path of the written scene.json.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"cameras": "cameras.json"}
    save_cameras(os.path.join(out_dir, "cameras.json"), cameras)
    if images is not None:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        manifest["images"] = []
        for index, image in enumerate(images):
            name = os.path.join("images", f"{index:03d}.png")
            save_image(os.path.join(out_dir, name), image)
            manifest["images"].append(name)
    if mono_normals is not None:
        os.makedirs(os.path.join(out_dir, "normals"), exist_ok=True)
        manifest["mono_normals"] = []
        for index, normals in enumerate(mono_normals):
            name = os.path.join("normals", f"{index:03d}.pfm")
            save_normal_map(os.path.join(out_dir, name), normals)
            manifest["mono_normals"].append(name)
    if base is not None:
        save_gaussians(os.path.join(out_dir, "base.ply"), base)
        manifest["base"] = "base.ply"
    if env is not None:
        save_gaussians(os.path.join(out_dir, "env.ply"), env)
        manifest["env"] = "env.ply"
    if points is not None:
        save_points(os.path.join(out_dir, "points.ply"), points, point_colors)
        manifest["points"] = "points.ply"
    path = os.path.join(out_dir, "scene.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    return path

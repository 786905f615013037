import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from PIL import Image
from plyfile import PlyData, PlyElement

from cameras import look_at
from conftest import random_set
from errors import DataError, FormatError
from scene_io import (
    gaussian_properties, load_gaussians, load_image, load_normal_map, load_points, load_scene, read_gaussian_header,
    read_pfm, save_gaussians, save_image, save_normal_map, save_points, save_scene, write_pfm,
)


def assert_same_set(a, b):
    assert a.kind == b.kind
    for name, value in a.parameters().items():
        assert_array_equal(b.parameters()[name], value)


@pytest.mark.parametrize("kind", ["base", "env"])
def test_gaussians_are_bit_identical_after_reload(rng, tmp_path, kind):
    gset = random_set(rng, 7, kind=kind)
    path = str(tmp_path / f"{kind}.ply")
    save_gaussians(path, gset)
    loaded = load_gaussians(path, kind)
    assert_same_set(gset, loaded)
    header = read_gaussian_header(path)
    assert header.vertex_count == 7
    assert [name for name, _ in header.properties] == gaussian_properties(kind)
    assert ("raw_blend" in gaussian_properties(kind)) == (kind == "base")


def test_kind_mismatch(rng, tmp_path):
    path = str(tmp_path / "base.ply")
    save_gaussians(path, random_set(rng, 2))
    with pytest.raises(FormatError, match="expected a env set"):
        load_gaussians(path, "env")


def test_truncated_payload_reports_offset(rng, tmp_path):
    path = tmp_path / "base.ply"
    save_gaussians(str(path), random_set(rng, 3))
    data = path.read_bytes()
    header_bytes = data.index(b"end_header\n") + len(b"end_header\n")
    stride = 8 * len(gaussian_properties("base"))
    path.write_bytes(data[:header_bytes + stride + 5])
    with pytest.raises(FormatError, match="truncated payload") as info:
        load_gaussians(str(path))
    assert info.value.offset == header_bytes + stride
    assert f"at byte {header_bytes + stride}" in str(info.value)
    assert "2 missing" in str(info.value)


def test_missing_set_kind(tmp_path):
    names = gaussian_properties("env")
    elements = np.zeros(2, dtype=[(name, "<f8") for name in names])
    path = str(tmp_path / "nokind.ply")
    PlyData([PlyElement.describe(elements, "vertex")], text=False, byte_order="<").write(path)
    with pytest.raises(FormatError, match="missing 'comment set_kind") as info:
        load_gaussians(path)
    assert info.value.offset == 0


def test_wrong_property_layout(tmp_path):
    elements = np.zeros(1, dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
    path = str(tmp_path / "short.ply")
    PlyData([PlyElement.describe(elements, "vertex")], text=False, byte_order="<",
            comments=["set_kind env"]).write(path)
    with pytest.raises(FormatError, match="properties for a env set"):
        load_gaussians(path)


def test_missing_gaussian_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_gaussians(str(tmp_path / "none.ply"))


def test_points_round_trip(rng, tmp_path):
    points = rng.normal(size=(20, 3))
    colors = rng.integers(0, 256, size=(20, 3)) / 255.0
    path = str(tmp_path / "points.ply")
    save_points(path, points, colors)
    loaded, loaded_colors = load_points(path)
    assert_array_equal(loaded, points)
    assert_allclose(loaded_colors, colors, atol=1e-12)

    save_points(path, points)
    assert load_points(path)[1] is None


def test_pfm_is_exact(rng, tmp_path):
    image = rng.normal(size=(5, 7, 3)).astype(np.float32)
    path = str(tmp_path / "image.pfm")
    write_pfm(path, image)
    assert_array_equal(read_pfm(path), image)
    depth = rng.uniform(size=(4, 3)).astype(np.float32)
    write_pfm(path, depth)
    loaded = load_image(path)
    assert loaded.shape == (4, 3)
    assert_array_equal(loaded, depth)
    with pytest.raises(ValueError):
        write_pfm(path, np.zeros((2, 2, 2)))


def test_truncated_pfm(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"PF\n4 4\n-1.0\n" + b"\0" * 10)
    with pytest.raises(FormatError, match="truncated PFM payload"):
        read_pfm(str(path))


def test_png_round_trip(rng, tmp_path):
    image = rng.integers(0, 256, size=(6, 5, 3)) / 255.0
    path = str(tmp_path / "image.png")
    save_image(path, image)
    assert_allclose(load_image(path), image, atol=1e-12)
    save_image(path, np.full((2, 2, 3), 1.7))
    assert_allclose(load_image(path), 1.0)


def test_sixteen_bit_png_is_rejected(tmp_path):
    path = str(tmp_path / "deep.png")
    Image.fromarray(np.full((4, 4), 40000, dtype=np.uint16)).save(path)
    with pytest.raises(FormatError, match="bit depth 16"):
        load_image(path)


def test_normal_map_png(tmp_path):
    normals = np.zeros((2, 2, 3))
    normals[0, 0] = [0.0, 0.0, -1.0]
    normals[0, 1] = [0.6, 0.0, 0.8]
    path = str(tmp_path / "normals.png")
    save_normal_map(path, normals)
    loaded = load_normal_map(path)
    assert_allclose(loaded[0, :2], normals[0, :2], atol=1e-2)
    assert not np.any(loaded[1])


def make_scene(tmp_path, rng, views=2):
    cameras = [look_at((0.2 * i, 0.0, -2.0), (0.0, 0.0, 0.0), width=5, height=4) for i in range(views)]
    images = [rng.integers(0, 256, size=(4, 5, 3)) / 255.0 for _ in range(views)]
    normals = [np.tile([0.0, 0.0, -1.0], (4, 5, 1)) for _ in range(views)]
    path = save_scene(str(tmp_path / "scene"), cameras, images, base=random_set(rng, 3),
                      env=random_set(rng, 4, kind="env"), mono_normals=normals,
                      points=rng.normal(size=(10, 3)))
    return path, cameras, images


def test_scene_round_trip(rng, tmp_path):
    path, cameras, images = make_scene(tmp_path, rng)
    bundle = load_scene(path)
    assert bundle.cameras == cameras
    assert [os.path.basename(p) for p in bundle.image_paths] == ["000.png", "001.png"]
    for loaded, image in zip(bundle.load_images(), images):
        assert_allclose(loaded, image, atol=1e-12)
    assert len(bundle.base) == 3 and len(bundle.env) == 4
    mono = bundle.load_mono_normals()
    assert_allclose(mono[1][..., 2], -1.0)
    points, colors = bundle.load_points()
    assert points.shape == (10, 3) and colors is None


def test_scene_count_mismatch(rng, tmp_path):
    path, _, _ = make_scene(tmp_path, rng)
    with open(path) as f:
        manifest = json.load(f)
    manifest["images"] = manifest["images"][:1]
    with open(path, "w") as f:
        json.dump(manifest, f)
    with pytest.raises(DataError, match="2 cameras but 1 images"):
        load_scene(path)


def test_scene_missing_reference(rng, tmp_path):
    path, _, _ = make_scene(tmp_path, rng)
    os.remove(os.path.join(os.path.dirname(path), "env.ply"))
    with pytest.raises(FormatError, match="env.ply"):
        load_scene(path)
    with pytest.raises(FileNotFoundError):
        load_scene(str(tmp_path / "elsewhere" / "scene.json"))


def test_image_size_must_match_camera(rng, tmp_path):
    path, _, _ = make_scene(tmp_path, rng)
    save_image(os.path.join(os.path.dirname(path), "images", "001.png"), np.zeros((3, 3, 3)))
    with pytest.raises(DataError, match="camera 1"):
        load_scene(path).load_images()


@pytest.mark.parametrize("kind", ["base", "env"])
def test_thousand_surfel_round_trip(tmp_path, kind):
    rng = np.random.default_rng(99)
    gset = random_set(rng, 1000, kind=kind, box=50.0)
    gset.sh_coeffs[:] = rng.normal(scale=1e3, size=gset.sh_coeffs.shape)
    gset.log_scales[0] = [-700.0, 700.0]
    path = str(tmp_path / "big.ply")
    save_gaussians(path, gset)
    assert_same_set(gset, load_gaussians(path, kind))

import os

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from compose import ComposeOptions, compose_frame
from metrics import psnr
from scene_io import load_scene
from synthetic import SYNTHETIC_SCENES, frames_from_normals, make_synthetic
from tracer import TraceOptions
from utils.math_utils import quaternion_to_matrix


def test_frames_map_z_onto_normals(rng):
    normals = rng.normal(size=(50, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[0] = [0.0, 1.0, 0.0]
    rotations = quaternion_to_matrix(frames_from_normals(normals))
    np.testing.assert_allclose(rotations[:, :, 2], normals, atol=1e-12)


def test_generation_is_deterministic_per_seed():
    a = make_synthetic("diffuse_box", seed=3, n_views=2, width=6, height=5)
    b = make_synthetic("diffuse_box", seed=3, n_views=2, width=6, height=5)
    c = make_synthetic("diffuse_box", seed=4, n_views=2, width=6, height=5)
    for x, y in zip(a.images, b.images):
        assert_array_equal(x, y)
    assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)
    assert a.images[0].shape == (5, 6, 3)
    assert len(a.cameras) == len(a.mono_normals) == 2


@pytest.mark.parametrize("name", SYNTHETIC_SCENES)
def test_every_scene_generates(name):
    scene = make_synthetic(name, seed=1, n_views=1, width=6, height=6)
    assert len(scene.base) > 0
    assert (len(scene.env) == 0) == (name == "diffuse_box")
    assert np.all((scene.images[0] >= 0.0) & (scene.images[0] <= 1.0))
    assert np.all(np.linalg.norm(scene.mono_normals[0], axis=-1) <= 1.0 + 1e-9)
    assert len(scene.points) == len(scene.base) + len(scene.env)


def test_bad_arguments():
    with pytest.raises(ValueError, match="Unknown synthetic scene"):
        make_synthetic("teapot")
    with pytest.raises(ValueError, match="n_views"):
        make_synthetic("diffuse_box", n_views=0)
    with pytest.raises(ValueError, match="env_distance"):
        make_synthetic("mirror_wall", env_distance=0.0)


def test_save_writes_a_trainable_scene(tmp_path):
    scene = make_synthetic("diffuse_box", seed=2, n_views=2, width=6, height=6)
    bundle = load_scene(scene.save(str(tmp_path / "plain")))
    assert bundle.base is None and bundle.env is None
    assert len(bundle.load_images()) == 2
    assert bundle.load_points()[0].shape == scene.points.shape

    bundle = load_scene(scene.save(str(tmp_path / "sets"), include_sets=True))
    assert len(bundle.base) == len(scene.base)
    # empty environments are not written
    assert bundle.env is None
    assert not os.path.exists(tmp_path / "sets" / "env.ply")


def test_mirror_reference_requires_a_plane():
    scene = make_synthetic("diffuse_box", n_views=1, width=4, height=4)
    with pytest.raises(ValueError, match="no mirror plane"):
        scene.mirror_reference(scene.cameras[0])


def test_mirror_matches_reflected_camera():
    scene = make_synthetic("mirror_wall", seed=5, n_views=1, width=12, height=12)
    camera = scene.cameras[0]
    frame = compose_frame(scene.base, scene.env, camera, ComposeOptions())
    mask = (frame.gbuffer.image("blend") > 0.99) & (frame.gbuffer.image("alpha") > 0.999)
    assert mask.sum() > 20
    reference = scene.mirror_reference(camera)
    assert psnr(frame.image()[mask], reference[mask]) > 40.0


def test_moving_the_wall_closer_shifts_the_reflection():
    reflections = []
    for distance in (3.0, 1.0):
        scene = make_synthetic("mirror_wall", seed=5, n_views=1, width=12, height=12, env_distance=distance)
        np.testing.assert_allclose(scene.env.centers[:, 2], -distance)
        camera = scene.cameras[0]
        frame = compose_frame(scene.base, scene.env, camera, ComposeOptions())
        mask = (frame.gbuffer.image("blend") > 0.99) & (frame.gbuffer.image("alpha") > 0.999)
        assert mask.sum() > 20
        reference = scene.mirror_reference(camera)
        assert psnr(frame.image()[mask], reference[mask]) > 40.0
        reflections.append((frame.image()[mask], reference[mask]))
    (far, far_reference), (near, _) = reflections
    assert np.mean(np.abs(far - near)) > 0.01
    assert psnr(near, far_reference) < 40.0


@pytest.mark.slow
def test_mirror_matches_reflected_camera_full_resolution():
    scene = make_synthetic("mirror_wall", seed=0, n_views=1, width=256, height=256, threads=8)
    camera = scene.cameras[0]
    frame = compose_frame(scene.base, scene.env, camera, ComposeOptions(trace=TraceOptions(threads=8)))
    mask = (frame.gbuffer.image("blend") > 0.99) & (frame.gbuffer.image("alpha") > 0.999)
    reference = scene.mirror_reference(camera, TraceOptions(threads=8))
    assert psnr(frame.image()[mask], reference[mask]) > 40.0

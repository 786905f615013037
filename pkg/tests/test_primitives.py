import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import random_set
from primitives import (
    SH_C0, SH_COEFFS, Gaussian2D, GaussianSet, build_proxy, build_transform, eval_sh, gaussian_value,
    invert_to_local, make_set, proxy_corners, rgb_to_dc, surfel_normal,
)
from utils.math_utils import quaternion_to_matrix, random_quaternions

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def surfel(center=(0.0, 0.0, 0.0), rotation=IDENTITY, scales=(1.0, 1.0), sh=None):
    return Gaussian2D(
        center=np.asarray(center, dtype=float),
        rotation=np.asarray(rotation, dtype=float),
        log_scales=np.log(np.asarray(scales, dtype=float)),
        raw_opacity=0.0,
        sh_coeffs=np.zeros((SH_COEFFS, 3)) if sh is None else sh,
    )


def test_build_transform_identity():
    H = build_transform(surfel()).H
    expected = np.eye(4)
    expected[2, 2] = 0.0
    assert_allclose(H, expected)


def test_build_transform_axis_aligned_scaling():
    H = build_transform(surfel(center=(1.0, 0.0, 0.0), scales=(2.0, 3.0))).H
    assert_allclose(H[:, 0], [2.0, 0.0, 0.0, 0.0])
    assert_allclose(H[:, 1], [0.0, 3.0, 0.0, 0.0])
    assert_allclose(H[:, 3], [1.0, 0.0, 0.0, 1.0])
    assert_allclose(H[3], [0.0, 0.0, 0.0, 1.0])


def test_build_transform_random_axes_are_orthogonal(rng):
    quats = random_quaternions(rng, 1000)
    scales = rng.uniform(0.01, 5.0, size=(1000, 2))
    for q, s in zip(quats, scales):
        H = build_transform(surfel(rotation=q, scales=s)).H
        assert np.linalg.norm(H[:3, 0]) == pytest.approx(s[0], rel=1e-10)
        assert np.linalg.norm(H[:3, 1]) == pytest.approx(s[1], rel=1e-10)
        assert abs(H[:3, 0] @ H[:3, 1]) < 1e-9 * s[0] * s[1]


def test_invert_to_local_center_and_unit_step(rng):
    q = random_quaternions(rng, 1)[0]
    g = surfel(center=(0.3, -1.0, 2.0), rotation=q, scales=(0.5, 2.0))
    t = build_transform(g)
    assert_allclose(invert_to_local(t, g.center), [0.0, 0.0, 0.0], atol=1e-12)
    t_u = g.rotation_matrix[:, 0]
    assert_allclose(invert_to_local(t, g.center + 0.5 * t_u), [1.0, 0.0, 0.0], atol=1e-12)


def test_invert_to_local_round_trip(rng):
    for q in random_quaternions(rng, 50):
        g = surfel(center=rng.normal(size=3), rotation=q, scales=rng.uniform(0.1, 3.0, size=2))
        t = build_transform(g)
        u, v = rng.uniform(-3.0, 3.0, size=2)
        world = t.H @ np.array([u, v, 0.0, 1.0])
        assert_allclose(invert_to_local(t, world[:3]), [u, v, 0.0], atol=1e-10)


def test_gaussian_value_closed_forms():
    assert gaussian_value(0.0, 0.0) == 1.0
    assert gaussian_value(3.0, 0.0) == pytest.approx(math.exp(-4.5))
    assert gaussian_value(1.0, 1.0) == pytest.approx(0.36788, abs=1e-5)
    radii = np.linspace(0.0, 4.0, 20)
    values = [gaussian_value(r, 0.0) for r in radii]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_eval_sh_dc_only_is_isotropic(rng):
    sh = np.zeros((SH_COEFFS, 3))
    sh[0] = [0.2, -0.4, 1.0]
    for d in rng.normal(size=(10, 3)):
        assert_allclose(eval_sh(sh, d / np.linalg.norm(d)), sh[0] * SH_C0 + 0.5)


def test_eval_sh_zero_coefficients_give_grey():
    assert_allclose(eval_sh(np.zeros(27), np.array([0.0, 0.0, 1.0])), [0.5, 0.5, 0.5])


def test_eval_sh_rejects_non_unit_direction():
    with pytest.raises(ValueError, match="unit length"):
        eval_sh(np.zeros(27), np.array([0.0, 0.0, 2.0]))


def test_eval_sh_higher_orders_average_out(rng):
    # large DC keeps every output above the zero clamp
    sh = rng.uniform(-0.2, 0.2, size=(SH_COEFFS, 3))
    sh[0] = 2.0
    dirs = rng.normal(size=(10000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    mean = np.mean([eval_sh(sh, d) for d in dirs], axis=0)
    assert_allclose(mean, sh[0] * SH_C0 + 0.5, atol=1e-2)


def test_eval_sh_is_linear_in_coefficients(rng):
    a = rng.uniform(-0.1, 0.1, size=(SH_COEFFS, 3))
    b = rng.uniform(-0.1, 0.1, size=(SH_COEFFS, 3))
    d = np.array([0.6, 0.0, 0.8])
    lhs = eval_sh(a + b, d) - 0.5
    rhs = (eval_sh(a, d) - 0.5) + (eval_sh(b, d) - 0.5)
    assert_allclose(lhs, rhs, atol=1e-12)


def test_surfel_normal_faces_the_viewer(rng):
    g = surfel()
    assert_allclose(surfel_normal(g, np.array([0.0, 0.0, -1.0])), [0.0, 0.0, 1.0])
    assert_allclose(surfel_normal(g, np.array([0.0, 0.0, 1.0])), [0.0, 0.0, -1.0])
    assert_allclose(surfel_normal(g, np.array([1.0, 0.0, 0.0])), [0.0, 0.0, 1.0])
    q = random_quaternions(rng, 1)[0]
    g = surfel(rotation=q)
    n = surfel_normal(g, np.array([0.0, 1.0, 0.0]))
    rot = g.rotation_matrix
    assert abs(n @ rot[:, 0]) < 1e-6 and abs(n @ rot[:, 1]) < 1e-6


def test_proxy_covers_three_sigma_square(rng):
    for q in random_quaternions(rng, 20):
        g = surfel(center=rng.normal(size=3), rotation=q, scales=rng.uniform(0.1, 2.0, size=2))
        proxy = build_proxy(g, 7)
        assert proxy.primitive_id == 7
        assert proxy.vertices.shape == (2, 3, 3)
        t = build_transform(g)
        # every proxy vertex maps back to a (+-3, +-3) corner on the plane
        local = np.array([invert_to_local(t, v) for v in proxy.vertices.reshape(-1, 3)])
        assert_allclose(np.abs(local[:, :2]), 3.0, atol=1e-9)
        assert_allclose(local[:, 2], 0.0, atol=1e-9)


def test_proxy_corners_match_transform(rng):
    q = random_quaternions(rng, 3)
    rot = quaternion_to_matrix(q)
    scales = rng.uniform(0.5, 1.5, size=(3, 2))
    centers = rng.normal(size=(3, 3))
    corners = proxy_corners(centers, rot, scales)
    for i in range(3):
        g = surfel(center=centers[i], rotation=q[i], scales=scales[i])
        H = build_transform(g).H
        for j, (u, v) in enumerate([(-3, -3), (3, -3), (3, 3), (-3, 3)]):
            assert_allclose(corners[i, j], (H @ np.array([u, v, 0.0, 1.0]))[:3], atol=1e-12)


def test_make_set_activations_round_trip():
    gset = make_set("base", [[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]], [IDENTITY, 2.0 * IDENTITY], 0.5, 0.3,
                    rgb_to_dc([0.2, 0.4, 0.6]), blend=0.7)
    assert len(gset) == 2
    assert_allclose(np.linalg.norm(gset.rotations, axis=1), 1.0)
    g = gset.surfel(1)
    assert g.opacity == pytest.approx(0.3)
    assert g.blend == pytest.approx(0.7)
    assert_allclose(g.scales, [0.5, 0.5])
    assert_allclose(eval_sh(g.sh_coeffs, np.array([0.0, 1.0, 0.0])), [0.2, 0.4, 0.6])


def test_env_sets_have_no_blend_weight():
    gset = make_set("env", [[0.0, 0.0, 0.0]], [IDENTITY], 1.0, 0.5, np.zeros((SH_COEFFS, 3)), blend=0.3)
    assert gset.raw_blend is None
    assert "raw_blend" not in gset.parameters()
    assert gset.surfel(0).blend is None


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="Unknown set kind"):
        GaussianSet.empty("sky")


def test_select_concat_and_generation(rng):
    gset = random_set(rng, 5)
    first = gset.generation
    gset.touch()
    assert gset.generation > first
    sub = gset.select(np.array([4, 0]))
    assert_allclose(sub.centers, gset.centers[[4, 0]])
    joined = sub.concat(gset)
    assert len(joined) == 7
    assert joined.generation != gset.generation
    with pytest.raises(ValueError, match="Cannot concatenate"):
        gset.concat(GaussianSet.empty("env"))
    copy = gset.copy()
    copy.centers[0] += 1.0
    assert not np.array_equal(copy.centers, gset.centers)

import numpy as np
import pytest
from numpy.testing import assert_allclose

import tracer
from cameras import camera_rays, look_at
from conftest import random_set
from errors import StaleStateError
from primitives import SH_COEFFS, GaussianSet, make_set, rgb_to_dc
from tracer import (
    NO_ID, Ray, TraceOptions, all_hits, build_bvh, build_set_bvh, integrate_ray, iterate_hits, next_chunk,
    partition_blocks, render_brute_force, render_rays,
)

IDENTITY = [1.0, 0.0, 0.0, 0.0]


def stacked_planes(count, spacing=1.0, opacity=0.1, start=1.0):
    centers = [[0.0, 0.0, start + spacing * i] for i in range(count)]
    return make_set("env", centers, [IDENTITY] * count, 0.5, opacity, np.zeros((SH_COEFFS, 3)))


def camera_ray_list(camera):
    origins, directions = camera_rays(camera)
    return [Ray(origins[i], directions[i]) for i in range(len(origins))]


def test_build_bvh_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        build_bvh([])


def test_single_surfel_bvh_is_one_leaf():
    gset = stacked_planes(1)
    bvh = build_bvh(gset.proxies(), gset.generation)
    assert bvh.node_count_total == 1
    assert bvh.node_left[0] == -1
    vertices = gset.proxy_vertices().reshape(-1, 3)
    assert_allclose(bvh.node_min[0], vertices.min(axis=0), atol=1e-8)
    assert_allclose(bvh.node_max[0], vertices.max(axis=0), atol=1e-8)


def test_root_covers_every_leaf(rng):
    gset = random_set(rng, 60)
    bvh = build_set_bvh(gset)
    root_min, root_max = np.array(bvh.node_min[0]), np.array(bvh.node_max[0])
    for lo, hi in zip(bvh.node_min, bvh.node_max):
        assert np.all(np.array(lo) >= root_min) and np.all(np.array(hi) <= root_max)
    assert bvh.primitive_count == 60


def test_every_primitive_reachable_through_its_center(rng):
    gset = random_set(rng, 500)
    bvh = build_set_bvh(gset)
    normals = gset.rotation_matrices()[:, :, 2]
    for pid in range(len(gset)):
        ray = Ray.create(gset.centers[pid] + 5.0 * normals[pid], -normals[pid])
        assert pid in {hit for hit, _ in iterate_hits(bvh, ray)}


def test_ray_missing_everything_returns_empty_buffer():
    gset = stacked_planes(3)
    bvh = build_set_bvh(gset)
    chunk = next_chunk(bvh, Ray.create([10.0, 10.0, 0.0], [0.0, 0.0, 1.0]), 0.0)
    assert chunk.count == 0 and not chunk.full


def test_single_plane_hit_depth():
    gset = stacked_planes(1, start=2.5)
    bvh = build_set_bvh(gset)
    chunk = next_chunk(bvh, Ray.create([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]), 0.0)
    assert chunk.ids == [0]
    assert chunk.depths[0] == pytest.approx(2.5)


def test_chunks_are_globally_sorted_across_boundaries():
    gset = stacked_planes(40, spacing=0.25)
    bvh = build_set_bvh(gset)
    ray = Ray.create([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
    counts, depths = [], []
    after, after_id = 0.0, NO_ID
    while True:
        chunk = next_chunk(bvh, ray, after, after_id, k=16)
        counts.append(chunk.count)
        depths.extend(chunk.depths)
        if not chunk.full:
            break
        after, after_id = chunk.depths[-1], chunk.ids[-1]
    assert counts[:3] == [16, 16, 8]
    assert all(b > a for a, b in zip(depths, depths[1:]))
    assert len(depths) == 40


def test_after_depth_excludes_earlier_hits():
    gset = stacked_planes(5)
    bvh = build_set_bvh(gset)
    chunk = next_chunk(bvh, Ray.create([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]), 3.0)
    assert chunk.depths == pytest.approx([4.0, 5.0])


def test_equal_depth_ties_delivered_once_in_id_order():
    centers = [[0.0, 0.0, 2.0], [0.1, 0.0, 2.0], [-0.1, 0.0, 2.0], [0.0, 0.0, 3.0]]
    gset = make_set("env", centers, [IDENTITY] * 4, 0.5, 0.3, np.zeros((SH_COEFFS, 3)))
    bvh = build_set_bvh(gset)
    ray = Ray.create([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
    for k in (1, 2, 16):
        assert [pid for pid, _ in iterate_hits(bvh, ray, k)] == [0, 1, 2, 3]


def test_iterate_hits_matches_all_hits(rng):
    gset = random_set(rng, 200)
    bvh = build_set_bvh(gset)
    for ray in camera_ray_list(look_at((0.0, 0.0, 0.0), (0.0, 0.0, 3.0), width=8, height=8, fov_degrees=50.0)):
        assert list(iterate_hits(bvh, ray, k=4)) == all_hits(bvh, ray)


def white_then_black(alpha=0.5):
    centers = [[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]
    sh = np.stack([rgb_to_dc([1.0, 1.0, 1.0]), rgb_to_dc([0.0, 0.0, 0.0])])
    return make_set("base", centers, [IDENTITY] * 2, 0.5, alpha, sh, blend=[0.2, 0.6])


def test_two_half_transparent_surfels():
    gset = white_then_black()
    bvh = build_set_bvh(gset)
    sample = integrate_ray(bvh, gset, Ray.create([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]))
    assert_allclose(sample.color, [0.5, 0.5, 0.5], atol=1e-12)
    assert sample.transmittance == pytest.approx(0.25)
    assert sample.alpha == pytest.approx(0.75)
    assert sample.depth == pytest.approx(0.5 * 1.0 + 0.25 * 2.0)
    assert sample.blend == pytest.approx(0.5 * 0.2 + 0.25 * 0.6)
    assert_allclose(sample.position, [0.0, 0.0, 1.0], atol=1e-12)
    # camera-facing normal, composited with the same weights
    assert_allclose(sample.normal, [0.0, 0.0, -0.75], atol=1e-12)


def test_opaque_surfel_is_clamped():
    gset = make_set("env", [[0.0, 0.0, 2.0]], [IDENTITY], 0.5, 0.99999, np.zeros((SH_COEFFS, 3)))
    bvh = build_set_bvh(gset)
    sample = integrate_ray(bvh, gset, Ray.create([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]))
    assert sample.alpha == pytest.approx(0.999)
    assert sample.depth == pytest.approx(2.0, rel=2e-3)


def test_low_alpha_hits_are_skipped():
    gset = make_set("env", [[0.0, 0.0, 2.0]], [IDENTITY], 0.5, 0.003, np.zeros((SH_COEFFS, 3)))
    bvh = build_set_bvh(gset)
    sample = integrate_ray(bvh, gset, Ray.create([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]))
    assert sample.transmittance == 1.0
    assert_allclose(sample.color, 0.0)


def test_termination_stops_traversal():
    gset = stacked_planes(10, opacity=0.99999)
    bvh = build_set_bvh(gset)
    opts = TraceOptions(record_hits=True)
    sample = integrate_ray(bvh, gset, Ray.create([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]), opts)
    # 0.001 ** 2 < 1e-4 after two clamped hits
    assert len(sample.hits) == 2


def test_empty_set_renders_background():
    gset = GaussianSet.empty("env")
    bvh = build_set_bvh(gset)
    sample = integrate_ray(bvh, gset, Ray.create([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]))
    assert sample.transmittance == 1.0
    assert_allclose(sample.color, 0.0)
    assert render_brute_force(gset, Ray.create([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])).transmittance == 1.0


def test_stale_bvh_rejected(rng):
    gset = random_set(rng, 5)
    bvh = build_set_bvh(gset)
    gset.touch()
    with pytest.raises(StaleStateError):
        integrate_ray(bvh, gset, Ray.create([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]))


@pytest.mark.parametrize("seed", range(5))
def test_bvh_integration_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    gset = random_set(rng, 100, kind="base")
    bvh = build_set_bvh(gset)
    camera = look_at((0.0, 0.0, 0.0), (0.0, 0.0, 3.0), width=12, height=12, fov_degrees=50.0)
    for ray in camera_ray_list(camera):
        traced = integrate_ray(bvh, gset, ray)
        oracle = render_brute_force(gset, ray)
        assert_allclose(traced.color, oracle.color, atol=1e-6)
        assert_allclose(traced.normal, oracle.normal, atol=1e-6)
        assert traced.depth == pytest.approx(oracle.depth, abs=1e-6)
        assert traced.blend == pytest.approx(oracle.blend, abs=1e-6)
        assert traced.transmittance == pytest.approx(oracle.transmittance, abs=1e-6)


def test_chunk_size_does_not_change_output(rng):
    gset = random_set(rng, 150, kind="base")
    bvh = build_set_bvh(gset)
    rays = camera_ray_list(look_at((0.0, 0.0, 0.0), (0.0, 0.0, 3.0), width=10, height=10, fov_degrees=50.0))
    reference = render_rays(bvh, gset, rays, TraceOptions(k=16))
    for k in (1, 4, 64):
        samples = render_rays(bvh, gset, rays, TraceOptions(k=k))
        for a, b in zip(samples, reference):
            assert_allclose(a.color, b.color, atol=1e-6)
            assert a.transmittance == pytest.approx(b.transmittance, abs=1e-6)


def test_transmittance_is_non_increasing(rng):
    gset = random_set(rng, 80)
    bvh = build_set_bvh(gset)
    ray = Ray.create([0.0, 0.0, 0.0], [0.05, -0.02, 1.0])
    hits = all_hits(bvh, ray)
    previous = 1.0
    for n in range(1, len(hits) + 1):
        sample = render_brute_force(gset.select(np.array([pid for pid, _ in hits[:n]])), ray)
        assert sample.transmittance <= previous + 1e-15
        previous = sample.transmittance


def test_render_rays_edge_cases_and_threads(rng):
    gset = random_set(rng, 120, kind="base")
    bvh = build_set_bvh(gset)
    assert render_rays(bvh, gset, []) == []
    rays = camera_ray_list(look_at((0.0, 0.0, 0.0), (0.0, 0.0, 3.0), width=9, height=7, fov_degrees=50.0))
    rays.append(rays[10])
    serial = render_rays(bvh, gset, rays, TraceOptions(threads=1))
    np.testing.assert_array_equal(serial[-1].color, serial[10].color)
    parallel = render_rays(bvh, gset, rays, TraceOptions(threads=4))
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.color, b.color)
        np.testing.assert_array_equal(a.position, b.position)
        assert a.transmittance == b.transmittance
    for ray, sample in zip(rays[:5], serial[:5]):
        np.testing.assert_array_equal(integrate_ray(bvh, gset, ray).color, sample.color)


def test_partition_blocks_covers_range():
    blocks = partition_blocks(10, 3)
    assert [i for block in blocks for i in block] == list(range(10))
    assert partition_blocks(2, 8) == [range(0, 1), range(1, 2)]
    assert partition_blocks(0, 4) == []


def test_render_rays_blocks_run_in_worker_processes(rng, monkeypatch):
    submitted = []

    class RecordingPool(tracer.ProcessPoolExecutor):
        def submit(self, fn, *args, **kwargs):
            submitted.append(len(args[1]))
            return super().submit(fn, *args, **kwargs)

    monkeypatch.setattr(tracer, "ProcessPoolExecutor", RecordingPool)
    gset = random_set(rng, 40, kind="base")
    bvh = build_set_bvh(gset)
    rays = camera_ray_list(look_at((0.0, 0.0, 0.0), (0.0, 0.0, 3.0), width=5, height=4, fov_degrees=50.0))
    parallel = render_rays(bvh, gset, rays, TraceOptions(threads=3))
    assert submitted == [len(block) for block in partition_blocks(len(rays), 3)]
    serial = render_rays(bvh, gset, rays, TraceOptions(threads=1))
    assert len(submitted) == 3
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.color, b.color)
        assert a.generation == b.generation == gset.generation


@pytest.mark.slow
def test_oracle_sweep_larger_scenes():
    for seed, count in ((10, 1000), (11, 2000)):
        rng = np.random.default_rng(seed)
        gset = random_set(rng, count, kind="base")
        bvh = build_set_bvh(gset)
        camera = look_at((0.0, 0.0, 0.0), (0.0, 0.0, 3.0), width=24, height=24, fov_degrees=50.0)
        for ray in camera_ray_list(camera):
            assert_allclose(integrate_ray(bvh, gset, ray).color, render_brute_force(gset, ray).color, atol=1e-6)

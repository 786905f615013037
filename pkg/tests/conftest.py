import numpy as np
import pytest

from cameras import look_at
from primitives import SH_COEFFS, make_set


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def near_identity_quaternions(rng, count, tilt=0.15):
    q = np.concatenate([np.ones((count, 1)), rng.uniform(-tilt, tilt, size=(count, 3))], axis=1)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def stacked_set(rng, kind="base", count=4, spread=0.1, z0=1.0, dz=0.5):
    """Surfels stacked along +z near the axis, all well inside each other's footprint."""
    centers = np.column_stack([
        rng.uniform(-spread, spread, size=count),
        rng.uniform(-spread, spread, size=count),
        z0 + dz * np.arange(count),
    ])
    sh = rng.uniform(-0.1, 0.1, size=(count, SH_COEFFS, 3))
    blend = rng.uniform(0.2, 0.8, size=count) if kind == "base" else None
    return make_set(kind, centers, near_identity_quaternions(rng, count),
                    rng.uniform(0.3, 0.6, size=(count, 2)), rng.uniform(0.1, 0.25, size=count), sh, blend)


def random_set(rng, count, kind="base", box=1.0):
    centers = rng.uniform(-box, box, size=(count, 3)) + np.array([0.0, 0.0, 3.0])
    q = rng.normal(size=(count, 4))
    sh = rng.uniform(-0.3, 0.3, size=(count, SH_COEFFS, 3))
    blend = rng.uniform(0.0, 1.0, size=count) if kind == "base" else None
    return make_set(kind, centers, q, rng.uniform(0.05, 0.3, size=(count, 2)), rng.uniform(0.05, 0.95, size=count),
                    sh, blend)


@pytest.fixture
def tiny_camera():
    return look_at((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), width=8, height=6, fov_degrees=30.0)

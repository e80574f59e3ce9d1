import numpy as np
import pytest

from segcalib.core import CameraIntrinsics
from segcalib.render import RenderConfig
from segcalib.synth import DEFAULT_GROUND_TRUTH, generate_scene, urban_intersection


@pytest.fixture(scope="session")
def small_scene():
    """A sparse version of the harness scene seen by a 160x100 camera."""
    cloud = generate_scene(urban_intersection(density=6, seed=1))
    K = CameraIntrinsics.from_fov(160, 100, 90.0)
    return cloud, K, DEFAULT_GROUND_TRUTH, RenderConfig(20.0, 1, 50)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

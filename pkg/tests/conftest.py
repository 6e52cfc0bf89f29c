import numpy as np
import pytest

from surfsplat.camera import Camera
from surfsplat.surfels import SurfelCloud


def random_cloud(n, seed=0, box=0.8, scale_range=(0.08, 0.3), dtype=np.float64):
    """Unstructured cloud with anisotropic scales and raw materials."""
    rng = np.random.default_rng(seed)
    return SurfelCloud(
        centers=rng.uniform(-box, box, size=(n, 3)).astype(dtype),
        quats=rng.normal(size=(n, 4)).astype(dtype),
        log_scales=np.log(rng.uniform(*scale_range, size=(n, 2))).astype(dtype),
        albedo_raw=rng.normal(0.0, 1.0, size=(n, 3)).astype(dtype),
        metallic_raw=rng.normal(0.0, 1.0, size=n).astype(dtype),
        roughness_raw=rng.normal(0.0, 1.0, size=n).astype(dtype),
    )


def random_camera(seed=0, width=48, height=48, radius=3.2, fov=45.0):
    rng = np.random.default_rng(seed)
    az = rng.uniform(0.0, 2.0 * np.pi)
    el = rng.uniform(-0.9, 0.9)
    eye = radius * np.array([np.cos(az) * np.cos(el),
                             np.sin(az) * np.cos(el), np.sin(el)])
    return Camera.perspective(width, height, fov, eye, (0.0, 0.0, 0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(0)

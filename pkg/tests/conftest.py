import numpy as np
import pytest

from priorsplat.camera import CameraView, look_at_w2c
from priorsplat.splats import SplatSet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_view(width=24, height=20, eye=(0.0, -0.1, 3.0), target=(0, 0, 0),
              focal=30.0, vid="v0"):
    w2c = look_at_w2c(np.asarray(eye, dtype=float), np.asarray(target, dtype=float))
    return CameraView(vid, width, height, focal, focal,
                      width / 2.0, height / 2.0, w2c)


def random_splats(n, seed=3, spread=0.3, scale_range=(0.15, 0.3),
                  opacity_range=(0.3, 1.2)):
    r = np.random.default_rng(seed)
    centers = r.normal(0, spread, (n, 3))
    centers[:, 2] = r.normal(0, 0.1, n)
    quats = r.normal(0, 1, (n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_scales = np.log(r.uniform(*scale_range, (n, 2)))
    opacity = r.uniform(*opacity_range, n)
    colors = r.normal(0, 0.5, (n, 3))
    return SplatSet(centers, quats, log_scales, opacity, colors)


@pytest.fixture
def small_view():
    return make_view()


@pytest.fixture(scope="session")
def open_scene_small():
    """A small open-preset scene shared by module tests."""
    from priorsplat.synth import generate_scene
    return generate_scene("open", n_views=8, resolution=(64, 48), seed=3,
                          n_cloud_samples=8000)

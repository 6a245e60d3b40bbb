import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wtrack.synth import ObjectSpec, SynthConfig, generate

settings.register_profile("wtrk", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("wtrk")


def small_config(**kw):
    base = dict(n_frames=8, height=64, width=80, n_static=150,
                objects=[ObjectSpec(n_points=30, center_px=(0.7, 0.5), radius=0.25)], seed=0)
    base.update(kw)
    return SynthConfig(**base).validate()


@pytest.fixture(scope="session")
def small_scene():
    return generate(small_config())


@pytest.fixture(scope="session")
def small_scene_dir(tmp_path_factory, small_scene):
    from wtrack.synth import write_synth
    d = tmp_path_factory.mktemp("small_scene")
    scene, gt = small_scene
    write_synth(d, scene, gt, small_config())
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

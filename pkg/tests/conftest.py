import numpy as np
import pytest

from kgad.config import RunConfig
from kgad.geometry import PointCloud, RigidTransform, random_rotation
from kgad.pipeline import build_reference
from kgad.synthetic import synth_object

SMALL_N = 4000

# Criterion lines collected by test_acceptance.py and printed at the end.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def random_pose(rng, diameter, max_angle=np.pi / 3, max_shift=0.25):
    R = random_rotation(rng, max_angle)
    return RigidTransform(R, rng.uniform(-max_shift, max_shift, 3) * diameter)


def small_config(**kw):
    base = dict(prototype_points=SMALL_N, test_points=500, cluster_size=1000, feature_points=1500)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def blend_setup():
    """Four posed noisy blend prototypes and a matching noise level."""
    diameter = synth_object("blend", SMALL_N, 0.0, 0).diameter()
    sigma = 0.002 * diameter
    rng = np.random.default_rng(7)
    protos = [synth_object("blend", SMALL_N, sigma, 50 + i).transformed(random_pose(rng, diameter))
              for i in range(4)]
    return {"prototypes": protos, "sigma": sigma, "diameter": diameter}


@pytest.fixture(scope="session")
def blend_model(blend_setup):
    return build_reference(blend_setup["prototypes"], small_config())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def plane_cloud(n=400, seed=0):
    g = np.random.default_rng(seed)
    pts = np.column_stack([g.uniform(-1, 1, n), g.uniform(-1, 1, n), np.zeros(n)])
    return PointCloud(pts)

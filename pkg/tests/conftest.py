import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from facekit.mesh import Mesh
from facekit.synth import benchmark_fixture, grid_topology, toy_model

settings.register_profile("facekit", deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow,
                                                 HealthCheck.function_scoped_fixture])
settings.load_profile("facekit")


def random_mesh(rng, n_vertices=50, n_faces=80, uv=True):
    """Random triangle soup over ``n_vertices`` points with distinct face indices."""
    faces = np.array([rng.choice(n_vertices, 3, replace=False) for _ in range(n_faces)])
    return Mesh(rng.normal(scale=50.0, size=(n_vertices, 3)), faces,
                rng.random((n_vertices, 2)) if uv else None)


def grid_patch(n=21, size=100.0, height=None):
    """Square patch in the z=0 plane (or z=height(x, y)) with a [0,1]^2 UV chart."""
    faces, uv = grid_topology(n)
    x = (uv[:, 0] - 0.5) * size
    y = (0.5 - uv[:, 1]) * size   # v grows downward, so normals face +z
    z = np.zeros_like(x) if height is None else height(x, y)
    return Mesh(np.c_[x, y, z], faces, uv)


@pytest.fixture(scope="session")
def toy():
    """50-identity / 52-expression full-rank model with 68 landmarks."""
    return toy_model(50, 52, 30, seed=0)


@pytest.fixture(scope="session")
def bench_manifest(tmp_path_factory):
    return benchmark_fixture(tmp_path_factory.mktemp("bench"))

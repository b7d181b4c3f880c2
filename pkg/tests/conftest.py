import sys

import numpy as np
import pytest

from tbgan.geometry import Mesh, cylindrical_unwrap
from tbgan.synthetic import FaceGrid, generate_corpus, grid_faces


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def blob_mesh(rng, n=50):
    """Random point cloud with arbitrary triangles; enough for alignment tests."""
    v = rng.standard_normal((n, 3))
    f = np.stack([np.arange(n - 2), np.arange(1, n - 1), np.arange(2, n)], axis=1)
    return Mesh(v, f, "blob")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def face_template():
    """Canonical synthetic face patch (y up, z forward) and its unwrap."""
    meshes, colors, *_ = generate_corpus(1, 1, seed=5)
    template = meshes[0]
    return template, cylindrical_unwrap(template), colors[0]


@pytest.fixture(scope="session")
def plane_mesh():
    n = 6
    xs, ys = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n))
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)
    return Mesh(v, grid_faces(n, n), "plane")


@pytest.fixture(scope="session")
def small_grid():
    return FaceGrid(16, 16)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])

import sys

import numpy as np
import pytest

from rbfpdm.mesh import icosphere
from rbfpdm.sdf import voxelize_sdf
from rbfpdm.shapes import ShapeSample


def shape_from_mesh(mesh, spacing, padding=None, shape_id="s"):
    padding = 3 * spacing if padding is None else padding
    return ShapeSample(shape_id, mesh, voxelize_sdf(mesh, spacing, padding))


@pytest.fixture(scope="session")
def sphere_mesh():
    return icosphere(3)


@pytest.fixture(scope="session")
def sphere_shape(sphere_mesh):
    """Unit sphere with a 0.1 voxel distance volume."""
    return shape_from_mesh(sphere_mesh, 0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])

import numpy as np
import pytest

from conftest import shape_from_mesh
from helpers import random_rotation
from rbfpdm.correspondence import icp, initialize, kabsch, medoid, select_reference
from rbfpdm.errors import ValidationError
from rbfpdm.geodesy import GeodesicIndex, farthest_point_sample
from rbfpdm.mesh import icosphere
from rbfpdm.regularizer import mismatch_report
from rbfpdm.shapes import ParticleSystem


def sphere(radius=1.0, shape_id="s", rotation=None):
    m = icosphere(3, radius=radius)
    if rotation is not None:
        m = m.transformed(rotation=rotation)
    return shape_from_mesh(m, 0.1 * radius, shape_id=shape_id)


def test_kabsch_recovers_rigid_motion(rng):
    src = rng.normal(size=(30, 3))
    rot, t = random_rotation(rng), rng.normal(size=3)
    xf = kabsch(src, src @ rot.T + t)
    assert np.allclose(xf.rotation, rot, atol=1e-10) and np.allclose(xf.translation, t, atol=1e-10)


def test_icp_aligns_a_small_rotation():
    m = icosphere(2).transformed(scale=1.0)
    pts = m.vertices * np.array([1.0, 0.7, 0.5])
    c, s = np.cos(0.2), np.sin(0.2)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    res = icp(pts @ rot.T + 0.05, pts)
    assert not res.diverged and res.rms < 1e-6


def test_medoid_ties_go_to_lowest_index():
    assert medoid(np.zeros((4, 4))) == 0
    rms = np.array([[0, 1, 5], [1, 0, 5], [5, 5, 0]], dtype=float)
    assert medoid(rms) == 0


def test_reference_of_two_equal_and_one_outlier():
    cohort = [sphere(1.0, "a"), sphere(1.0, "b"), sphere(2.0, "c")]
    assert select_reference(cohort) in (0, 1)


def test_reference_needs_two_shapes():
    with pytest.raises(ValidationError, match="2 shapes"):
        select_reference([sphere()])


def test_identical_shapes_match_identically():
    cohort = [sphere(shape_id=f"s{i}") for i in range(3)]
    init = initialize(cohort, 16)
    for perm in init.permutations:
        assert perm.tolist() == list(range(16))
    assert np.allclose(init.costs, 0.0)
    assert np.allclose(init.particles.particles, init.particles.particles[0])


def test_rotated_sphere_mismatch_not_worse():
    rot = np.diag([-1.0, -1.0, 1.0])
    cohort = [sphere(shape_id="a"), sphere(shape_id="b", rotation=rot)]
    indices = [GeodesicIndex(s.mesh) for s in cohort]
    raw = np.stack([farthest_point_sample(ix, 32)[0] for ix in indices])
    before = mismatch_report(ParticleSystem(["a", "b"], raw), indices, 0).total
    init = initialize(cohort, 32, reference=0, indices=indices)
    after = mismatch_report(init.particles, indices, 0).total
    assert after <= before


def test_four_particles_on_surface_and_bijective():
    cohort = [sphere(1.0, "a"), sphere(1.2, "b"), sphere(0.9, "c")]
    init = initialize(cohort, 4)
    ps = init.particles
    assert ps.particles.shape == (3, 4, 3)
    tol = np.array([s.snap_tolerance for s in cohort])[:, None]
    assert np.all(ps.surface_residuals(cohort) <= tol)
    for perm in init.permutations:
        assert sorted(perm.tolist()) == [0, 1, 2, 3]


def test_initialization_is_deterministic():
    rot = random_rotation(np.random.default_rng(5))
    cohort = [sphere(1.0, "a"), sphere(1.1, "b", rot), sphere(0.95, "c")]
    a = initialize(cohort, 12)
    b = initialize(cohort, 12)
    assert a.reference == b.reference
    assert np.array_equal(a.particles.particles, b.particles.particles)


def test_too_few_particles():
    with pytest.raises(ValidationError):
        initialize([sphere(), sphere()], 3)

import numpy as np
import pytest

from rbfpdm.errors import ParticleFileError, ValidationError
from rbfpdm.mesh import icosphere, save_mesh
from rbfpdm.sdf import save_sdf_volume, voxelize_sdf
from rbfpdm.shapes import ParticleSystem, load_particles, make_shape, save_particles


def test_particle_round_trip(tmp_path, rng):
    ps = ParticleSystem(["a", "b", "c"], rng.normal(size=(3, 17, 3)) * 1e3)
    paths = save_particles(ps, tmp_path)
    assert [p.name for p in paths] == ["a.particles", "b.particles", "c.particles"]
    back = load_particles(tmp_path, ["a", "b", "c"])
    assert np.abs(back.particles - ps.particles).max() <= 1e-12
    assert back.shape_ids == ps.shape_ids
    assert load_particles(tmp_path).shape_ids == ["a", "b", "c"]


def test_count_mismatch(tmp_path):
    np.savetxt(tmp_path / "a.particles", np.zeros((4, 3)))
    np.savetxt(tmp_path / "b.particles", np.zeros((5, 3)))
    with pytest.raises(ParticleFileError, match="count mismatch"):
        load_particles(tmp_path, ["a", "b"])


def test_missing_file_names_shape(tmp_path):
    np.savetxt(tmp_path / "a.particles", np.zeros((4, 3)))
    with pytest.raises(ParticleFileError, match="shape femur7"):
        load_particles(tmp_path, ["a", "femur7"])
    with pytest.raises(ParticleFileError):
        load_particles(tmp_path / "empty")


def test_bad_columns(tmp_path):
    np.savetxt(tmp_path / "a.particles", np.zeros((4, 2)))
    with pytest.raises(ParticleFileError, match="3 columns"):
        load_particles(tmp_path, ["a"])


def test_particle_system_validation():
    with pytest.raises(ValidationError):
        ParticleSystem(["a"], np.zeros((1, 4, 2)))
    with pytest.raises(ValidationError):
        ParticleSystem(["a", "b"], np.zeros((1, 4, 3)))
    ps = ParticleSystem(["a"], np.zeros((1, 4, 3)))
    assert ps.flat().shape == (1, 12)
    cp = ps.copy()
    cp.particles[0, 0, 0] = 1.0
    assert ps.particles[0, 0, 0] == 0.0


def test_make_shape_with_and_without_volume(tmp_path):
    mesh = icosphere(2, radius=5.0)
    save_mesh(mesh, tmp_path / "s.obj")
    built = make_shape("s", tmp_path / "s.obj", spacing=0.5)
    assert built.snap_tolerance == pytest.approx(0.125)
    assert built.check_agreement() < 0.5
    save_sdf_volume(voxelize_sdf(mesh, 0.5, 2.0), tmp_path / "s.sdf")
    loaded = make_shape("s", tmp_path / "s.obj", tmp_path / "s.sdf")
    assert np.array_equal(loaded.sdf.values, voxelize_sdf(mesh, 0.5, 2.0).values)


def test_mesh_volume_disagreement(tmp_path):
    save_mesh(icosphere(2, radius=5.0), tmp_path / "s.obj")
    save_sdf_volume(voxelize_sdf(icosphere(2, radius=8.0), 0.5, 2.0), tmp_path / "big.sdf")
    with pytest.raises(ValidationError, match="disagree"):
        make_shape("s", tmp_path / "s.obj", tmp_path / "big.sdf")

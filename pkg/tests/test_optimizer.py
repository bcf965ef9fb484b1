import csv

import numpy as np
import pytest

from conftest import shape_from_mesh
from rbfpdm.errors import ValidationError
from rbfpdm.geodesy import GeodesicIndex, farthest_point_sample
from rbfpdm.losses import median_spacing
from rbfpdm.mesh import icosphere
from rbfpdm.optimizer import (LOG_COLUMNS, EpochLog, OptimizationConfig, clip_steps, minibatches,
                              run_adaptive, run_stage1, run_stage2)
from rbfpdm.regularizer import mismatch_report
from rbfpdm.shapes import ParticleSystem
from rbfpdm.snap import snap_to_surface

FAST = dict(learning_rate=4000.0, beta=1e-5, gamma=4e-4, step_clip=0.5)


@pytest.fixture(scope="module")
def mesh():
    return icosphere(3, radius=20.0)


@pytest.fixture(scope="module")
def identical(mesh):
    """Five copies of one sphere with the same 32 FPS particles on each."""
    cohort = [shape_from_mesh(mesh, 2.0, shape_id=f"s{k}") for k in range(5)]
    _, v = farthest_point_sample(GeodesicIndex(mesh), 32)
    ps = ParticleSystem([s.id for s in cohort], np.stack([mesh.vertices[v]] * 5))
    return cohort, ps


@pytest.fixture(scope="module")
def scaled(mesh):
    """Three spheres of different radius, same particle layout."""
    cohort = [shape_from_mesh(mesh.transformed(scale=f), 2.0, shape_id=f"r{k}")
              for k, f in enumerate((0.9, 1.0, 1.1))]
    _, v = farthest_point_sample(GeodesicIndex(mesh), 24)
    ps = ParticleSystem([s.id for s in cohort], np.stack([s.mesh.vertices[v] for s in cohort]))
    return cohort, ps


# --- configuration -----------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(learning_rate=-1), dict(c_stage2=0.0), dict(c_stage2=1.5),
                                 dict(minibatch=1), dict(kernel="gauss"), dict(regularizer_interval=0),
                                 dict(running_mean_decay=1.0), dict(dipole_offset=0.0)])
def test_config_rejects(bad):
    with pytest.raises(ValidationError):
        OptimizationConfig(**bad)


def test_config_defaults_and_coercion():
    cfg = OptimizationConfig()
    assert (cfg.learning_rate, cfg.alpha_stage1, cfg.alpha_stage2) == (1.0, 10.0, 5.0)
    assert (cfg.regularizer_interval, cfg.stage2_epochs, cfg.neighbors) == (25, 200, 6)
    got = OptimizationConfig.from_dict({"beta": "1e-5", "stage2_epochs": "12", "minibatch": None})
    assert got.beta == 1e-5 and isinstance(got.beta, float)
    assert got.stage2_epochs == 12 and isinstance(got.stage2_epochs, int)
    assert OptimizationConfig.from_dict(got.to_dict()) == got
    with pytest.raises(ValidationError):
        OptimizationConfig.from_dict({"learning_rat": 1})
    with pytest.raises(ValidationError):
        OptimizationConfig.from_dict({"beta": "lots"})
    with pytest.raises(ValidationError):
        OptimizationConfig.from_dict({"beta": None})


# --- helpers -----------------------------------------------------------------

def test_minibatches_partition():
    rng = np.random.default_rng(0)
    batches = minibatches(rng, 19, 8)
    assert len(batches) == 2
    assert sorted(np.concatenate(batches).tolist()) == list(range(19))
    assert [len(b) for b in minibatches(rng, 5, 8)] == [5]


def test_clip_steps():
    step = np.array([[3.0, 4.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.0, 0.0]])
    out = clip_steps(step, 1.0)
    assert np.allclose(out[0], [0.6, 0.8, 0.0])
    assert np.array_equal(out[1:], step[1:])


# --- stage 1 ------------------------------------------------------------------

def test_identical_shapes_stay_matched(identical):
    cohort, ps = identical
    cfg = OptimizationConfig(**FAST, stage1_max_epochs=10, regularizer_interval=2)
    res = run_stage1(cohort, ps, cfg, 0)
    checkpoints = [h["mismatched"] for h in res.history if h["mismatched"] != ""]
    assert checkpoints == [0]
    assert res.converged and res.epochs == 2
    p = res.particles.particles
    assert np.abs(p - p[0]).max() < 1e-9


def test_identical_shapes_through_stage2(identical):
    cohort, ps = identical
    cfg = OptimizationConfig(**FAST, stage1_max_epochs=4, regularizer_interval=2, stage2_epochs=4)
    s1 = run_stage1(cohort, ps, cfg, 0)
    s2 = run_stage2(cohort, s1.particles, cfg, 0)
    index = GeodesicIndex(cohort[0].mesh)
    assert mismatch_report(s2.particles, [index] * 5, 0).total == 0


def test_zero_weights_are_stationary(scaled):
    cohort, ps = scaled
    start = ps
    for _ in range(4):
        start = snap_to_surface(start, cohort)
    cfg = OptimizationConfig(alpha_stage1=0.0, beta=0.0, gamma=0.0, stage1_max_epochs=3,
                             regularizer_interval=100)
    res = run_stage1(cohort, start, cfg, 1)
    assert np.abs(res.particles.particles - start.particles).max() < 1e-9
    assert res.epochs == 3 and not res.converged


def test_sampling_only_spreads_clustered_particles(scaled):
    cohort, ps = scaled
    rng = np.random.default_rng(3)
    cluster = np.array([0.0, 0.0, 1.0]) + rng.normal(scale=0.15, size=(24, 3))
    cluster /= np.linalg.norm(cluster, axis=1, keepdims=True)
    start = ParticleSystem(ps.shape_ids, np.stack([cluster * r for r in (18.0, 20.0, 22.0)]))
    cfg = OptimizationConfig(learning_rate=4000.0, beta=0.0, gamma=0.0, step_clip=0.5,
                             stage1_max_epochs=15, regularizer_interval=100)
    res = run_stage1(cohort, start, cfg, 1)

    def min_gap(p):
        d = np.linalg.norm(p[:, None] - p[None], axis=2)
        np.fill_diagonal(d, np.inf)
        return d.min()

    start = snap_to_surface(start, cohort)
    for i in range(3):
        assert median_spacing(res.particles.particles[i]) > 1.5 * median_spacing(start.particles[i])
        assert min_gap(res.particles.particles[i]) > min_gap(start.particles[i])


def test_particles_on_surface_after_every_iteration(scaled):
    cohort, ps = scaled
    worst = []

    def check(stage, epoch, it, system):
        worst.append(max(float((r / s.snap_tolerance).max())
                         for r, s in zip(system.surface_residuals(cohort), cohort)))

    cfg = OptimizationConfig(**FAST, stage1_max_epochs=3, regularizer_interval=2, stage2_epochs=2,
                             minibatch=2)
    s1 = run_stage1(cohort, ps, cfg, 1, callback=check)
    run_stage2(cohort, s1.particles, cfg, 1, callback=check)
    assert len(worst) == 6     # 3 + 2 iterations plus the stage-1 regularizer checkpoint
    assert max(worst) <= 1.0


def test_serial_determinism(scaled):
    cohort, ps = scaled
    cfg = OptimizationConfig(**FAST, stage1_max_epochs=3, regularizer_interval=2, seed=5)
    a = run_stage1(cohort, ps, cfg, 1).particles.particles
    b = run_stage1(cohort, ps, cfg, 1).particles.particles
    assert np.array_equal(a, b)
    c = run_stage1(cohort, ps, OptimizationConfig(**FAST, stage1_max_epochs=3, regularizer_interval=2,
                                                   seed=6), 1).particles.particles
    assert not np.array_equal(a, c)


def test_input_not_modified(scaled):
    cohort, ps = scaled
    before = ps.particles.copy()
    run_stage1(cohort, ps, OptimizationConfig(**FAST, stage1_max_epochs=1), 1)
    assert np.array_equal(ps.particles, before)


# --- stage 2 -------------------------------------------------------------------

def test_stage2_rejects_c_zero(scaled):
    cohort, ps = scaled
    with pytest.raises(ValidationError):
        run_stage2(cohort, ps, OptimizationConfig(), 1, c=0.0)
    with pytest.raises(ValidationError):
        run_adaptive(cohort, ps, OptimizationConfig(), 1, c=-0.1)


def test_stage2_early_stop_on_movement(scaled):
    cohort, ps = scaled
    cfg = OptimizationConfig(**FAST, stage2_epochs=50, movement_tolerance=1e6)
    res = run_stage2(cohort, ps, cfg, 1)
    assert res.epochs == 1 and res.converged
    cfg = OptimizationConfig(**FAST, stage2_epochs=3, movement_tolerance=0.0)
    res = run_stage2(cohort, ps, cfg, 1)
    assert res.epochs == 3 and not res.converged


def test_needs_two_shapes(scaled):
    cohort, ps = scaled
    one = ParticleSystem(ps.shape_ids[:1], ps.particles[:1])
    with pytest.raises(ValidationError):
        run_stage1(cohort[:1], one, OptimizationConfig(), 0)
    with pytest.raises(ValidationError):
        run_stage1(cohort[:2], ps, OptimizationConfig(), 0)


def test_band_samples_must_cover_particles(scaled):
    cohort, ps = scaled
    with pytest.raises(ValidationError):
        run_stage1(cohort, ps, OptimizationConfig(band_samples=8, stage1_max_epochs=1), 0)


def test_epoch_log(tmp_path, scaled):
    cohort, ps = scaled
    path = tmp_path / "log.csv"
    log = EpochLog(path)
    cfg = OptimizationConfig(**FAST, stage1_max_epochs=2, regularizer_interval=2, stage2_epochs=2)
    s1 = run_stage1(cohort, ps, cfg, 1, log=log)
    run_stage2(cohort, s1.particles, cfg, 1, log=log)
    log.close()
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert [(r["stage"], r["epoch"]) for r in rows] == [("1", "1"), ("1", "2"), ("2", "1"), ("2", "2")]
    assert rows[0]["mismatched"] == "" and rows[1]["mismatched"] != ""
    # burn-in: only the sampling term in the very first epoch
    assert float(rows[0]["correspondence"]) == 0.0 and float(rows[0]["eigenshape"]) == 0.0
    assert float(rows[1]["correspondence"]) > 0.0
    assert len(log.rows) == 4

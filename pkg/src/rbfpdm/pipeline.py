"""Cohort loading and the end-to-end runs behind the command line."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CohortConfig
from .correspondence import initialize, select_reference
from .errors import ValidationError
from .geodesy import GeodesicIndex
from .mesh import TriangleMesh, load_mesh, save_mesh
from .metrics import (compactness, fit_pca, generalization, specificity_curve, surface_to_surface,
                      warp_mesh)
from .optimizer import EpochLog, run_stage1, run_stage2
from .shapes import ParticleSystem, load_particles, make_shape, save_particles

logger = logging.getLogger(__name__)

RUN_FILE = "run.json"
PHASES = ("init", "stage1", "final")


@dataclass(frozen=True, eq=False)
class MeshOnly:
    """A cohort member without a distance volume, for mesh-only commands."""
    id: str
    mesh: TriangleMesh


def load_cohort(cfg: CohortConfig, executor=None) -> list:
    """ShapeSamples for every config entry; volumes are voxelized when not given."""
    cfg.check_files()

    def one(entry):
        sdf = cfg.resolve(entry.sdf) if entry.sdf is not None else None
        return make_shape(entry.id, cfg.resolve(entry.mesh), sdf, cfg.spacing, cfg.padding)

    return list(executor.map(one, cfg.shapes)) if executor else [one(s) for s in cfg.shapes]


def load_meshes(cfg: CohortConfig) -> list[MeshOnly]:
    cfg.check_files()
    return [MeshOnly(s.id, load_mesh(cfg.resolve(s.mesh))) for s in cfg.shapes]


def particle_dir(cfg: CohortConfig, phase: str) -> Path:
    return cfg.output_dir / f"particles_{phase}"


def read_run(directory) -> dict | None:
    path = Path(directory) / RUN_FILE
    return json.loads(path.read_text()) if path.is_file() else None


def write_run(directory, info: dict):
    Path(directory).mkdir(parents=True, exist_ok=True)
    (Path(directory) / RUN_FILE).write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")


def reference_index(cfg: CohortConfig, cohort, particles_dir=None, override: str | None = None) -> int:
    """Reference shape: explicit override, then the config, then the run record, then the ICP medoid."""
    ids = [s.id for s in cohort]
    for candidate in (override, cfg.reference):
        if candidate is not None:
            if candidate not in ids:
                raise ValidationError(f"unknown reference shape {candidate!r}")
            return ids.index(candidate)
    for directory in ([Path(particles_dir).parent] if particles_dir is not None else []) + [cfg.output_dir]:
        run = read_run(directory)
        if run and run.get("reference") in ids:
            return ids.index(run["reference"])
    return select_reference(cohort)


def run_init(cfg: CohortConfig, cohort, indices=None, executor=None):
    ref = None if cfg.reference is None else cfg.shape_ids.index(cfg.reference)
    init = initialize(cohort, cfg.particles, reference=ref, indices=indices, executor=executor)
    save_particles(init.particles, particle_dir(cfg, "init"))
    info = {"reference": cohort[init.reference].id, "shape_ids": [s.id for s in cohort],
            "particles": cfg.particles, "seed": cfg.seed,
            "init_costs": [float(c) for c in init.costs]}
    write_run(cfg.output_dir, info)
    return init, info


def run_optimize(cfg: CohortConfig, executor=None):
    """Initialize, stage 1, stage 2; particles are written after each phase.

    Returns (final ParticleSystem, run record). The record's "stage1_converged"
    says whether the mismatch tolerance was met.
    """
    cohort = load_cohort(cfg, executor)
    indices = [GeodesicIndex(s.mesh) for s in cohort]
    init, info = run_init(cfg, cohort, indices, executor)
    ref = init.reference
    log = EpochLog(cfg.output_dir / "log.csv")
    try:
        s1 = run_stage1(cohort, init.particles, cfg.optimization, ref, indices=indices, log=log,
                        executor=executor)
        save_particles(s1.particles, particle_dir(cfg, "stage1"))
        s2 = run_stage2(cohort, s1.particles, cfg.optimization, ref, log=log, executor=executor)
        save_particles(s2.particles, particle_dir(cfg, "final"))
    finally:
        log.close()
    info.update({"stage1_epochs": s1.epochs, "stage1_converged": s1.converged,
                 "stage2_epochs": s2.epochs, "stage2_settled": s2.converged})
    write_run(cfg.output_dir, info)
    return s2.particles, info


def read_particles(cfg: CohortConfig, directory) -> ParticleSystem:
    ps = load_particles(directory, cfg.shape_ids)
    if ps.n_particles != cfg.particles:
        logger.warning("particle files hold %d particles per shape, config says %d",
                       ps.n_particles, cfg.particles)
    return ps


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


def evaluate(cfg: CohortConfig, particles_dir, out_dir, n_samples: int = 25000,
             distribution: str = "uniform", reference: str | None = None, plot: bool = False) -> dict:
    """Compactness, generalization and specificity curves plus surface-to-surface tables."""
    cohort = load_meshes(cfg)
    ps = read_particles(cfg, particles_dir)
    if ps.n_shapes < 3:
        raise ValidationError("evaluation needs at least 3 shapes")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = fit_pca(ps)
    comp = compactness(model)
    gen_rms = generalization(ps, "rms").curve
    gen_mean = generalization(ps, "mean").curve
    spec = specificity_curve(model, ps, n_samples, seed=cfg.seed, distribution=distribution)
    modes = np.arange(1, model.n_modes + 1)
    _write_csv(out / "compactness.csv", ["modes", "compactness"],
               [[m, _fmt(v)] for m, v in zip(modes, comp)])
    _write_csv(out / "generalization.csv", ["modes", "rms", "mean"],
               [[m, _fmt(a), _fmt(b)] for m, (a, b) in enumerate(zip(gen_rms, gen_mean))])
    _write_csv(out / "specificity.csv", ["modes", "specificity"],
               [[m, _fmt(v)] for m, v in zip(modes, spec)])

    ref = reference_index(cfg, cohort, particles_dir, reference)
    rows, means = [], []
    for i, shape in enumerate(cohort):
        warped = warp_mesh(cohort[ref].mesh, ps.particles[ref], ps.particles[i])
        d = surface_to_surface(shape.mesh, warped)
        rows.append([shape.id, _fmt(d.mean), _fmt(d.max)])
        if i != ref:
            means.append(d.mean)
    _write_csv(out / "surface_distance.csv", ["shape_id", "mean", "max"], rows)

    summary = {
        "shapes": ps.n_shapes, "particles": ps.n_particles, "reference": cohort[ref].id,
        "compactness_mode1": float(comp[0]),
        "generalization_mode1_rms": float(gen_rms[1]),
        "specificity_mode1": float(spec[0]),
        "surface_distance_mean": float(np.mean(means)),
        "specificity_distribution": distribution,
        "specificity_samples": int(n_samples),
    }
    lines = [
        f"shapes: {summary['shapes']}, particles per shape: {summary['particles']}",
        f"reference shape: {summary['reference']}",
        f"compactness, mode 1: {comp[0]:.4f}; modes for 95%: {int(np.searchsorted(comp, 0.95) + 1)}",
        f"generalization (RMS per-particle distance), 0 / 1 modes: {gen_rms[0]:.4g} / {gen_rms[1]:.4g}",
        f"specificity, mode 1 ({distribution} in +/-3 sd, {n_samples} samples, mean per-particle "
        f"distance): {spec[0]:.4g}",
        f"two-way surface distance, mean over non-reference shapes: {summary['surface_distance_mean']:.4g}",
    ]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    if plot:
        _plot(out / "metrics.png", modes, comp, gen_rms, spec)
    return summary


def _plot(path, modes, comp, gen, spec):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(1, 3, figsize=(12, 3.5))
    ax[0].plot(modes, comp, "o-")
    ax[0].set_title("compactness")
    ax[1].plot(np.arange(len(gen)), gen, "o-")
    ax[1].set_title("generalization (RMS)")
    ax[2].plot(modes, spec, "o-")
    ax[2].set_title("specificity")
    for a in ax:
        a.set_xlabel("modes")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def reconstruct(cfg: CohortConfig, particles_dir, out_dir, reference: str | None = None) -> list[Path]:
    """Warp the reference mesh onto every shape's particles and write the meshes."""
    cohort = load_meshes(cfg)
    ps = read_particles(cfg, particles_dir)
    ref = reference_index(cfg, cohort, particles_dir, reference)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, shape in enumerate(cohort):
        path = out / f"{shape.id}.obj"
        save_mesh(warp_mesh(cohort[ref].mesh, ps.particles[ref], ps.particles[i]), path)
        paths.append(path)
    return paths

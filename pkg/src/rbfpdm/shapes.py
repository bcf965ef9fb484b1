"""Cohort members and particle systems, plus particle file persistence."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParticleFileError, ValidationError
from .mesh import TriangleMesh, load_mesh
from .sdf import SignedDistanceVolume, load_sdf_volume, voxelize_sdf

PARTICLE_SUFFIX = ".particles"


@dataclass(frozen=True, eq=False)
class ShapeSample:
    id: str
    mesh: TriangleMesh
    sdf: SignedDistanceVolume

    @property
    def snap_tolerance(self) -> float:
        return 0.25 * self.sdf.max_spacing

    def check_agreement(self) -> float:
        """Max |sdf| over mesh vertices; raises if the two disagree."""
        worst = float(np.abs(self.sdf.query(self.mesh.vertices)).max())
        if worst > 1.5 * self.sdf.max_spacing:
            raise ValidationError(
                f"shape {self.id}: mesh and SDF disagree (max |D| at vertices {worst:.4g} "
                f"> 1.5 x spacing {self.sdf.max_spacing:.4g})")
        return worst


def make_shape(shape_id: str, mesh_path, sdf_path=None, spacing=None, padding=None) -> ShapeSample:
    """Load a cohort member; the SDF is voxelized from the mesh when no volume is given."""
    mesh = load_mesh(mesh_path)
    if sdf_path is not None:
        sdf = load_sdf_volume(sdf_path)
    else:
        if spacing is None:
            spacing = mesh.bbox_diagonal / 64
        sdf = voxelize_sdf(mesh, spacing, padding if padding is not None else 4 * spacing)
    shape = ShapeSample(shape_id, mesh, sdf)
    shape.check_agreement()
    return shape


class ParticleSystem:
    """I shapes x J ordered particles; index j is the same landmark on every shape.

    The optimizer is the only writer; everything else reads `particles`.
    """

    def __init__(self, shape_ids, particles):
        particles = np.array(particles, dtype=np.float64)
        if particles.ndim != 3 or particles.shape[2] != 3:
            raise ValidationError(f"particles must have shape (I, J, 3), got {particles.shape}")
        shape_ids = [str(s) for s in shape_ids]
        if len(shape_ids) != particles.shape[0]:
            raise ValidationError("one shape id per particle set is required")
        self.shape_ids = shape_ids
        self.particles = particles

    @property
    def n_shapes(self) -> int:
        return self.particles.shape[0]

    @property
    def n_particles(self) -> int:
        return self.particles.shape[1]

    def copy(self) -> "ParticleSystem":
        return ParticleSystem(list(self.shape_ids), self.particles.copy())

    def flat(self) -> np.ndarray:
        """(I, 3J) matrix of particle vectors."""
        return self.particles.reshape(self.n_shapes, -1)

    def surface_residuals(self, shapes) -> np.ndarray:
        """|D_i(p_ij)| for every particle."""
        return np.stack([np.abs(s.sdf.query(p)) for s, p in zip(shapes, self.particles)])


def save_particles(ps: ParticleSystem, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for sid, pts in zip(ps.shape_ids, ps.particles):
        path = directory / f"{sid}{PARTICLE_SUFFIX}"
        with open(path, "w") as fh:
            for x, y, z in pts.tolist():
                fh.write(f"{x!r} {y!r} {z!r}\n")
        paths.append(path)
    return paths


def load_particles(directory, shape_ids=None) -> ParticleSystem:
    """Read one particle file per shape.

    With `shape_ids` the files are looked up by id (in that order); otherwise
    every ``*.particles`` file in the directory is read in sorted order.
    """
    directory = Path(directory)
    if shape_ids is None:
        paths = sorted(directory.glob(f"*{PARTICLE_SUFFIX}"))
        if not paths:
            raise ParticleFileError(f"no particle files in {directory}")
        shape_ids = [p.name[: -len(PARTICLE_SUFFIX)] for p in paths]
    else:
        paths = [directory / f"{sid}{PARTICLE_SUFFIX}" for sid in shape_ids]
    sets = []
    for sid, path in zip(shape_ids, paths):
        if not path.is_file():
            raise ParticleFileError(f"missing particle file for shape {sid}: {path}")
        try:
            arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise ParticleFileError(f"{path}: {exc}") from exc
        if arr.shape[1] != 3:
            raise ParticleFileError(f"{path}: expected 3 columns, found {arr.shape[1]}")
        if sets and len(arr) != len(sets[0]):
            raise ParticleFileError(
                f"particle count mismatch: {path} has {len(arr)} rows, "
                f"{paths[0]} has {len(sets[0])}")
        sets.append(arr)
    return ParticleSystem(shape_ids, np.stack(sets))

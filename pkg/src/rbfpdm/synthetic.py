"""Parametric synthetic cohorts with known ground-truth variation.

All families are radial deformations of a subdivided icosahedron, so every
mesh is closed, manifold and consistently oriented. Units are millimetres.
Every family is sized like a large bone (about 100 across): the
adaptive sampling weight mixes a squared-length reconstruction error with a
unitless uniform term, so its effect depends on the length scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .mesh import TriangleMesh, icosphere, save_mesh

FAMILIES = ("sphere-bump", "ellipsoid", "box-feature")
MANIFEST = "manifest.json"


@dataclass(eq=False)
class SyntheticShape:
    id: str
    mesh: TriangleMesh
    params: dict
    mask: np.ndarray | None = None     # vertex indices of the feature region


@dataclass(eq=False)
class SyntheticCohort:
    family: str
    seed: int
    shapes: list = field(default_factory=list)


def _unit_sphere(subdivisions: int):
    base = icosphere(subdivisions)
    return base.vertices / np.linalg.norm(base.vertices, axis=1, keepdims=True), base.faces


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _jitter_direction(rng, axis, spread):
    """Unit vector within about `spread` radians of `axis`."""
    return _unit(np.asarray(axis, dtype=np.float64) + spread * rng.normal(size=3))


def sphere_bump_mesh(radius: float, height: float, direction, width: float, subdivisions: int = 4):
    """Sphere with a Gaussian radial bump; returns (mesh, mask of vertices inside 3 widths).

    Three widths is where the bump has fallen to about 1% of its height, so the
    mask covers the flank as well as the crest.
    """
    u, faces = _unit_sphere(subdivisions)
    angle = np.arccos(np.clip(u @ _unit(direction), -1.0, 1.0))
    r = radius + height * np.exp(-0.5 * (angle / width) ** 2)
    mesh = TriangleMesh.from_arrays(u * r[:, None], faces)
    return mesh, np.flatnonzero(angle <= 3.0 * width)


def ellipsoid_radial(directions, axes) -> np.ndarray:
    """Points of the ellipsoid with semi-axes `axes` along the given unit directions."""
    u = np.asarray(directions, dtype=np.float64)
    r = 1.0 / np.sqrt(((u / np.asarray(axes, dtype=np.float64)) ** 2).sum(axis=1))
    return u * r[:, None]


def ellipsoid_mesh(axes, subdivisions: int = 4):
    # radial map keeps the triangulation star-shaped about the origin
    u, faces = _unit_sphere(subdivisions)
    return TriangleMesh.from_arrays(ellipsoid_radial(u, axes), faces)


def box_feature_mesh(axes, exponent: float, height: float, width: float, subdivisions: int = 4):
    """Rounded box |x/a|^p + |y/b|^p + |z/c|^p = 1 with a Gaussian bump on the +x face;
    returns (mesh, mask of vertices inside 3 widths)."""
    u, faces = _unit_sphere(subdivisions)
    a = np.asarray(axes, dtype=np.float64)
    r = (np.abs(u / a) ** exponent).sum(axis=1) ** (-1.0 / exponent)
    angle = np.arccos(np.clip(u[:, 0], -1.0, 1.0))
    r = r + height * np.exp(-0.5 * (angle / width) ** 2)
    mesh = TriangleMesh.from_arrays(u * r[:, None], faces)
    return mesh, np.flatnonzero(angle <= 3.0 * width)


def generate(family: str, count: int, seed: int = 0, subdivisions: int = 4, **overrides) -> SyntheticCohort:
    """Draw `count` shapes from a family.

    sphere-bump: radius 100, bump height U(24, 40), width 0.2 rad, direction
        within ~0.15 rad of +z.
    ellipsoid: axes (120, 80, 60) each scaled by U(0.8, 1.2); with
        ``one_parameter=True`` only the first axis varies, U(88, 152).
    box-feature: axes (100, 80, 60) scaled by U(0.9, 1.1), exponent 4, bump
        height U(12, 28) on the +x face.
    """
    if family not in FAMILIES:
        raise ValidationError(f"unknown family {family!r}; choose from {FAMILIES}")
    if count < 1:
        raise ValidationError("count must be >= 1")
    rng = np.random.default_rng(seed)
    cohort = SyntheticCohort(family, int(seed))
    for k in range(count):
        sid = f"{family}-{k:03d}"
        if family == "sphere-bump":
            radius = float(overrides.get("radius", 100.0))
            width = float(overrides.get("width", 0.2))
            height = float(rng.uniform(*overrides.get("height_range", (24.0, 40.0))))
            direction = _jitter_direction(rng, (0, 0, 1), float(overrides.get("spread", 0.1)))
            mesh, mask = sphere_bump_mesh(radius, height, direction, width, subdivisions)
            params = {"radius": radius, "height": height, "width": width, "direction": direction.tolist()}
        elif family == "ellipsoid":
            if overrides.get("one_parameter", False):
                axes = np.array([rng.uniform(88.0, 152.0), 80.0, 60.0])
            else:
                axes = np.array([120.0, 80.0, 60.0]) * rng.uniform(0.8, 1.2, size=3)
            mesh, mask = ellipsoid_mesh(axes, subdivisions), None
            params = {"axes": axes.tolist()}
        else:
            axes = np.array([100.0, 80.0, 60.0]) * rng.uniform(0.9, 1.1, size=3)
            height = float(rng.uniform(12.0, 28.0))
            mesh, mask = box_feature_mesh(axes, 4.0, height, 0.35, subdivisions)
            params = {"axes": axes.tolist(), "exponent": 4.0, "height": height, "width": 0.35}
        cohort.shapes.append(SyntheticShape(sid, mesh, params, mask))
    return cohort


def write_cohort(cohort: SyntheticCohort, out_dir) -> Path:
    """Write one OBJ per shape plus manifest.json; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for shape in cohort.shapes:
        name = f"{shape.id}.obj"
        save_mesh(shape.mesh, out / name)
        entry = {"id": shape.id, "mesh": name, "params": shape.params}
        if shape.mask is not None:
            entry["mask"] = shape.mask.tolist()
        entries.append(entry)
    manifest = {"family": cohort.family, "seed": cohort.seed, "count": len(entries), "shapes": entries}
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    return json.loads(path.read_text())

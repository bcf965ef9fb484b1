"""Projection of particles onto the zero level set of each shape's distance volume."""

from __future__ import annotations

import logging

import numpy as np

from .shapes import ParticleSystem

logger = logging.getLogger(__name__)

MIN_GRADIENT = 0.1


def snap_points(shape, points, passes: int = 2) -> tuple[np.ndarray, int]:
    """p <- p - D(p) grad D / |grad D|, repeated; returns (points, fallback count).

    Where |grad D| < 0.1 (near the medial axis) the point is instead
    projected onto the closest mesh point. Any point still off the surface by
    more than the snap tolerance after the passes is also projected.
    """
    p = np.array(points, dtype=np.float64).reshape(-1, 3)
    sdf = shape.sdf
    weak = np.zeros(len(p), dtype=bool)
    for _ in range(passes):
        d = sdf.query(p)
        g = sdf.gradient(p)
        norm = np.linalg.norm(g, axis=1)
        bad = norm < MIN_GRADIENT
        weak |= bad
        ok = ~bad
        p[ok] -= (d[ok] / norm[ok])[:, None] * g[ok]
    off = np.abs(sdf.query(p)) > shape.snap_tolerance
    fallback = weak | off
    if np.any(fallback):
        if np.any(weak):
            logger.warning("shape %s: %d particles near the medial axis, projected onto the mesh",
                           shape.id, int(weak.sum()))
        p[fallback] = shape.mesh.proximity.project(p[fallback])
    return p, int(fallback.sum())


def snap_to_surface(ps: ParticleSystem, cohort, passes: int = 2) -> ParticleSystem:
    out = ps.copy()
    for i, shape in enumerate(cohort):
        out.particles[i], _ = snap_points(shape, ps.particles[i], passes)
    return out

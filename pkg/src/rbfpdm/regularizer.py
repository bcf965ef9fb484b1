"""Geodesic-neighborhood mismatch detection and repair against a reference shape.

A particle j on shape i is mismatched when some particle that is a geodesic
neighbor of j on the reference shape is not a neighbor of j on shape i.
Repair walks j along the surface toward each missing neighbor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geodesy import (GeodesicIndex, geodesic_step_away, geodesic_walk, neighbors_from_matrix,
                      pairwise_geodesics, surface_distance_matrix)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MismatchReport:
    shape_ids: list
    counts: np.ndarray          # (I, J) missing reference neighbors per particle
    reference: int

    @property
    def mismatched_particles(self) -> np.ndarray:
        """Per shape: number of particles with at least one missing neighbor."""
        return (self.counts > 0).sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.mismatched_particles.sum())

    def to_csv(self) -> str:
        lines = ["shape_id,mismatched_particles,missing_neighbors"]
        for sid, row in zip(self.shape_ids, self.counts):
            lines.append(f"{sid},{int((row > 0).sum())},{int(row.sum())}")
        return "\n".join(lines) + "\n"


def _indices(meshes_or_indices):
    return [m if isinstance(m, GeodesicIndex) else GeodesicIndex(m) for m in meshes_or_indices]


def _reference_index(ps, reference) -> int:
    if isinstance(reference, (int, np.integer)):
        ref = int(reference)
    else:
        if reference not in ps.shape_ids:
            raise ValidationError(f"unknown reference shape {reference!r}")
        ref = ps.shape_ids.index(reference)
    if not 0 <= ref < ps.n_shapes:
        raise ValidationError(f"reference index {ref} out of range for {ps.n_shapes} shapes")
    return ref


def _neighbor_sets(geo, factor):
    """Like `neighbors_from_matrix` but tolerant of transient coincident particles."""
    g = geo.copy()
    np.fill_diagonal(g, np.inf)
    dstar = g.min(axis=1)
    return [frozenset(np.flatnonzero(row <= factor * d).tolist()) for row, d in zip(g, dstar)]


def _missing(ref_nb, geo, factor):
    nb = _neighbor_sets(geo, factor)
    return [sorted(r - n) for r, n in zip(ref_nb, nb)]


def _closest_excluding(geo, k, j):
    row = geo[k].copy()
    row[[k, j]] = np.inf
    return row.min()


def mismatch_report(ps, meshes, reference, factor: float = 1.5) -> MismatchReport:
    """Count, per particle, reference-shape neighbors that are not neighbors on each shape."""
    indices = _indices(meshes)
    if len(indices) != ps.n_shapes:
        raise ValidationError(f"{len(indices)} meshes for {ps.n_shapes} particle sets")
    ref = _reference_index(ps, reference)
    ref_nb = neighbors_from_matrix(pairwise_geodesics(indices[ref], ps.particles[ref]), factor)
    counts = np.zeros((ps.n_shapes, ps.n_particles), dtype=np.int64)
    for i, index in enumerate(indices):
        if i == ref:
            continue
        miss = _missing(ref_nb, pairwise_geodesics(index, ps.particles[i]), factor)
        counts[i] = [len(m) for m in miss]
    return MismatchReport(list(ps.shape_ids), counts, ref)


def _refresh_row(index: GeodesicIndex, pts, geo, j):
    """Recompute geodesic distances between particle j and all others in place."""
    row = surface_distance_matrix(index, pts[j:j + 1], pts)[0]
    row[j] = 0.0
    geo[j, :] = row
    geo[:, j] = row


def _median_closest(geo):
    g = geo.copy()
    np.fill_diagonal(g, np.inf)
    return float(np.median(g.min(axis=1)))


def _involvement(missing, geo=None):
    """Per particle: own missing neighbors plus how often it is missed by
    others. With `geo`, also how often it is the closest neighbor (which sets
    the neighborhood radius) of a particle that misses one."""
    score = np.array([len(m) for m in missing])
    if geo is not None:
        g = geo.copy()
        np.fill_diagonal(g, np.inf)
    for j, m in enumerate(missing):
        for k in m:
            score[k] += 1
        if m and geo is not None:
            score[int(np.argmin(g[j]))] += 1
    return score


def regularize_shape(index: GeodesicIndex, particles, ref_nb, ref_geo, factor: float = 1.5,
                     rounds: int = 20, min_spread: float = 0.75):
    """One repair pass over a single shape; returns (new particles, number of moves).

    A particle is involved in a mismatch when it misses a reference neighbor,
    is itself missed by one, or is the closest neighbor of a particle that
    misses one. Particles involved at the start of the pass are visited one
    at a time, always taking the unvisited one with the highest involvement
    under the current positions (ties by index).

    The visited particle j is anchored to the reference neighbors it is
    missing plus its reference neighbors that are currently uninvolved. For
    an anchor k the target geodesic gap is k's closest-neighbor distance on
    this shape, scaled by how far j sat from k relative to k's closest
    neighbor on the reference; when j was k's closest neighbor this is exactly
    k's closest-neighbor distance. j walks along the geodesic toward k (or
    steps back along it when too close) to meet the gap, cycling through the
    anchors in index order until its movement stalls.

    A visit is kept only if it does not raise the shape's number of
    mismatched particles, so a pass never raises that count, and if the
    shape's median closest-neighbor distance stays above `min_spread` times
    its value at the start of the pass. The second condition stops walks from
    cascading into clusters when most particles are mismatched; a single
    particle passing close to another barely moves the median.
    """
    pts = np.array(particles, dtype=np.float64)
    geo = pairwise_geodesics(index, pts)
    floor = min_spread * _median_closest(geo)
    missing = _missing(ref_nb, geo, factor)
    score = _involvement(missing, geo)
    pending = score > 0
    best_total = sum(1 for m in missing if m)
    moves = 0
    while True:
        score[~pending] = 0
        if score.max() == 0:
            break
        j = int(np.argmax(score))           # first index among the highest scores
        pending[j] = False
        involved = _involvement(missing) > 0
        anchors = sorted(set(missing[j]) | {k for k in ref_nb[j] if not involved[k]})
        settle = 1e-3 * _closest_excluding(ref_geo, j, j)
        saved = pts[j].copy(), geo[j].copy()
        for _ in range(rounds):
            moved = 0.0
            for k in anchors:
                gap = _closest_excluding(geo, k, j) * ref_geo[j, k] / _closest_excluding(ref_geo, k, j)
                length = geo[j, k]
                old = pts[j].copy()
                if length > gap:
                    pts[j] = geodesic_walk(index, pts[j], pts[k], length - gap)
                elif length < gap:
                    pts[j] = geodesic_step_away(index, pts[j], pts[k], gap - length)
                else:
                    continue
                _refresh_row(index, pts, geo, j)
                moved = max(moved, float(np.linalg.norm(pts[j] - old)))
                moves += 1
            if moved < settle:
                break
        trial = _missing(ref_nb, geo, factor)
        total = sum(1 for m in trial if m)
        if total > best_total or _median_closest(geo) < floor:
            pts[j], geo[j, :] = saved
            geo[:, j] = saved[1]
        else:
            missing, best_total = trial, total
            score = _involvement(missing, geo)
    return pts, moves


def regularize(ps, meshes, reference, factor: float = 1.5, executor=None):
    """One repair pass (see `regularize_shape`) on every non-reference shape.

    Within a shape moves are sequential and in place; shapes are independent.
    """
    indices = _indices(meshes)
    if len(indices) != ps.n_shapes:
        raise ValidationError(f"{len(indices)} meshes for {ps.n_shapes} particle sets")
    ref = _reference_index(ps, reference)
    ref_geo = pairwise_geodesics(indices[ref], ps.particles[ref])
    ref_nb = neighbors_from_matrix(ref_geo, factor)
    out = ps.copy()
    todo = [i for i in range(ps.n_shapes) if i != ref]

    def one(i):
        return regularize_shape(indices[i], ps.particles[i], ref_nb, ref_geo, factor)

    results = list(executor.map(one, todo)) if executor else [one(i) for i in todo]
    for i, (pts, moves) in zip(todo, results):
        out.particles[i] = pts
        if moves:
            logger.debug("shape %s: %d regularizing walks", ps.shape_ids[i], moves)
    return out


def converged(report: MismatchReport, tolerance: int) -> bool:
    """True iff every shape has at most `tolerance` mismatched particles."""
    return bool(np.all(report.mismatched_particles <= tolerance))

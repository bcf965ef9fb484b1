"""Reference-shape selection and particle initialization.

Every shape gets J geodesic farthest-point samples. Samples on each
non-reference shape are then reordered to match the reference: the cost of
pairing reference particle j with candidate k compares their sorted geodesic
distance profiles (intrinsic to each shape) plus the Euclidean distance after
rigid alignment. When the alignment is unreliable (near-symmetric shapes
such as spheres) the Euclidean term can mislead, so a profile-only matching is
also solved and whichever leaves fewer geodesic-neighborhood mismatches
against the reference is kept. One regularizing pass follows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .geodesy import GeodesicIndex, farthest_point_sample, neighbors_from_matrix, pairwise_geodesics
from .hungarian import assignment_cost, hungarian_match
from .regularizer import regularize
from .shapes import ParticleSystem
from .snap import snap_to_surface

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __call__(self, x):
        return np.asarray(x) @ self.rotation.T + self.translation


IDENTITY = RigidTransform(np.eye(3), np.zeros(3))


def kabsch(src, dst) -> RigidTransform:
    """Least-squares rotation and translation taking src onto dst (no reflection)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, cd - rot @ cs)


def subsample(points, count: int) -> np.ndarray:
    """Evenly strided subset of at most `count` rows."""
    if len(points) <= count:
        return np.asarray(points)
    return np.asarray(points)[np.linspace(0, len(points) - 1, count).astype(np.int64)]


@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform
    rms: float
    diverged: bool


def icp(source, target, iterations: int = 30, divergence_run: int = 5) -> IcpResult:
    """Point-to-point rigid ICP from the identity.

    If the RMS grows for `divergence_run` consecutive iterations the
    registration is abandoned and the unregistered RMS is reported.
    """
    src = np.asarray(source, dtype=np.float64)
    tree = cKDTree(target)
    tgt = np.asarray(target, dtype=np.float64)
    d0, _ = tree.query(src)
    rms0 = float(np.sqrt(np.mean(d0 ** 2)))
    xf = IDENTITY
    cur = src
    prev, growing = rms0, 0
    for _ in range(iterations):
        _, nn = tree.query(cur)
        xf = kabsch(src, tgt[nn])
        cur = xf(src)
        d, _ = tree.query(cur)
        rms = float(np.sqrt(np.mean(d ** 2)))
        growing = growing + 1 if rms > prev else 0
        prev = rms
        if growing >= divergence_run:
            return IcpResult(IDENTITY, rms0, True)
    return IcpResult(xf, prev, False)


def register_cohort(cohort, points: int = 500):
    """Pairwise ICP between all shapes.

    Returns (rms matrix, transforms) where transforms[a][b] maps shape a
    onto shape b.
    """
    n = len(cohort)
    clouds = [subsample(s.mesh.vertices, points) for s in cohort]
    rms = np.zeros((n, n))
    xfs = [[IDENTITY] * n for _ in range(n)]
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            res = icp(clouds[a], clouds[b])
            if res.diverged:
                logger.warning("ICP diverged registering %s to %s; using unregistered distance",
                               cohort[a].id, cohort[b].id)
            rms[a, b] = res.rms
            xfs[a][b] = res.transform
    return rms, xfs


def medoid(rms: np.ndarray) -> int:
    """Index with the smallest total (symmetrized) distance; ties go to the lowest index."""
    total = (rms + rms.T).sum(axis=1)
    best = total.min()
    tol = 1e-9 * max(abs(best), 1e-300) + 1e-12
    return int(np.flatnonzero(total <= best + tol)[0])


def select_reference(cohort, points: int = 500) -> int:
    """ICP medoid of the cohort."""
    if len(cohort) < 2:
        raise ValidationError("need >= 2 shapes to select a reference")
    rms, _ = register_cohort(cohort, points)
    return medoid(rms)


def profile_cost(ref_geo, ref_points, geo, points, to_ref: RigidTransform, weight: float = 1.0):
    """J x J matching cost between reference particles (rows) and candidates (columns).

    Mean absolute difference of the sorted within-shape geodesic profiles plus
    `weight` times the distance after rigid alignment; both terms are lengths.
    """
    a = np.sort(ref_geo, axis=1)
    b = np.sort(geo, axis=1)
    cost = np.abs(a[:, None, :] - b[None, :, :]).mean(axis=2)
    aligned = to_ref(points)
    cost += weight * np.linalg.norm(ref_points[:, None, :] - aligned[None, :, :], axis=2)
    return cost


def count_mismatched(ref_nb, geo, perm, factor: float = 1.5) -> int:
    """Particles whose reference neighborhood is not contained in their own after reordering."""
    nb = neighbors_from_matrix(geo[np.ix_(perm, perm)], factor)
    return sum(1 for r, n in zip(ref_nb, nb) if r - n)


# position weights tried in order; ties keep the earlier one
MATCH_WEIGHTS = (1.0, 0.0)


@dataclass(eq=False)
class Initialization:
    particles: ParticleSystem
    reference: int
    costs: list            # assignment cost per shape (0 for the reference)
    permutations: list


def initialize(cohort, n_particles: int, reference: int | None = None, icp_points: int = 500,
               factor: float = 1.5, indices=None, executor=None) -> Initialization:
    """FPS on every shape, Hungarian matching to the reference, one regularizing pass, snap."""
    if n_particles < 4:
        raise ValidationError(f"need at least 4 particles, got {n_particles}")
    if len(cohort) < 2:
        raise ValidationError("need >= 2 shapes to initialize")
    rms, xfs = register_cohort(cohort, icp_points)
    if reference is None:
        reference = medoid(rms)
    if indices is None:
        indices = [GeodesicIndex(s.mesh) for s in cohort]

    def sample(i):
        pts, _ = farthest_point_sample(indices[i], n_particles)
        return pts, pairwise_geodesics(indices[i], pts)

    samples = list(executor.map(sample, range(len(cohort)))) if executor else [
        sample(i) for i in range(len(cohort))]
    ref_pts, ref_geo = samples[reference]
    ref_nb = neighbors_from_matrix(ref_geo, factor)
    particles = np.empty((len(cohort), n_particles, 3))
    costs, perms = [], []
    for i, (pts, geo) in enumerate(samples):
        if i == reference:
            perm = np.arange(n_particles)
            costs.append(0.0)
        else:
            best = None
            for weight in MATCH_WEIGHTS:
                cost = profile_cost(ref_geo, ref_pts, geo, pts, xfs[i][reference], weight)
                cand = hungarian_match(cost)
                key = count_mismatched(ref_nb, geo, cand, factor)
                if best is None or key < best[0]:
                    best = (key, cand, assignment_cost(cost, cand))
            _, perm, c = best
            costs.append(c)
        perms.append(perm)
        particles[i] = pts[perm]
    ps = ParticleSystem([s.id for s in cohort], particles)
    ps = regularize(ps, indices, reference, factor, executor=executor)
    ps = snap_to_surface(ps, cohort)
    return Initialization(ps, int(reference), costs, perms)

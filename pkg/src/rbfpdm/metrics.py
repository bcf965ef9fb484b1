"""PCA shape models and their quality metrics, plus particle-driven mesh warping."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import RbfSolveError, ValidationError
from .mesh import TriangleMesh
from .shapes import ParticleSystem

DISTRIBUTIONS = ("uniform", "gaussian")


def _flat(ps) -> np.ndarray:
    if isinstance(ps, ParticleSystem):
        return ps.flat()
    x = np.asarray(ps, dtype=np.float64)
    return x.reshape(len(x), -1)


@dataclass(frozen=True, eq=False)
class PcaShapeModel:
    mean: np.ndarray          # (3J,)
    modes: np.ndarray         # (I-1, 3J), orthonormal rows
    eigenvalues: np.ndarray   # (I-1,), nonincreasing

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    def project(self, x, m: int) -> np.ndarray:
        """Coefficients of x on the first m modes."""
        return (np.asarray(x) - self.mean) @ self.modes[:m].T

    def reconstruct(self, coeffs) -> np.ndarray:
        c = np.asarray(coeffs, dtype=np.float64)
        m = c.shape[-1]
        return self.mean + c @ self.modes[:m]


def fit_pca(ps) -> PcaShapeModel:
    """Sample-covariance PCA (divisor I - 1) of the flattened particle vectors.

    Mode signs are fixed so the largest-magnitude component is positive,
    which makes the model independent of cohort order.
    """
    x = _flat(ps)
    n = len(x)
    if n < 2:
        raise ValidationError(f"PCA needs at least 2 shapes, got {n}")
    mean = x.mean(axis=0)
    _, sv, vt = np.linalg.svd(x - mean, full_matrices=False)
    k = n - 1
    modes = vt[:k].copy()
    lam = sv[:k] ** 2 / (n - 1)
    idx = np.argmax(np.abs(modes), axis=1)
    signs = np.sign(modes[np.arange(k), idx])
    signs[signs == 0] = 1.0
    modes *= signs[:, None]
    return PcaShapeModel(mean, modes, lam)


def compactness(model: PcaShapeModel) -> np.ndarray:
    """Cumulative fraction of variance captured by the first m modes, m = 1..M."""
    lam = np.clip(model.eigenvalues, 0.0, None)
    total = lam.sum()
    if not total > 0:
        raise ValidationError("all eigenvalues are zero; compactness is undefined")
    out = np.cumsum(lam) / total
    out[-1] = 1.0
    return out


def particle_distance(a, b, kind: str = "rms") -> np.ndarray:
    """Per-particle Euclidean distance between flattened particle vectors,
    aggregated as root-mean-square ("rms") or arithmetic mean ("mean")."""
    d = np.linalg.norm((np.asarray(a) - np.asarray(b)).reshape(*np.shape(a)[:-1], -1, 3), axis=-1)
    if kind == "rms":
        return np.sqrt((d ** 2).mean(axis=-1))
    if kind == "mean":
        return d.mean(axis=-1)
    raise ValidationError(f"unknown distance aggregation {kind!r}")


@dataclass(frozen=True, eq=False)
class Generalization:
    per_holdout: np.ndarray   # (I, M + 1) error with m = 0..M modes
    kind: str

    @property
    def curve(self) -> np.ndarray:
        return self.per_holdout.mean(axis=0)


def generalization(ps, kind: str = "rms") -> Generalization:
    """Leave-one-out reconstruction error using m = 0 (mean only) .. I - 2 modes.

    The default RMS per-particle distance is the norm of the residual, so it
    can only shrink as nested modes are added; "mean" averages per-particle
    distances instead and carries no such guarantee.
    """
    x = _flat(ps)
    n = len(x)
    if n < 3:
        raise ValidationError(f"generalization needs at least 3 shapes, got {n}")
    out = np.zeros((n, n - 1))
    for h in range(n):
        model = fit_pca(np.delete(x, h, axis=0))
        for m in range(n - 1):
            rec = model.reconstruct(model.project(x[h], m)) if m else model.mean
            out[h, m] = particle_distance(rec, x[h], kind)
    return Generalization(out, kind)


def _nearest_training_distance(samples, training, kind: str) -> np.ndarray:
    """min over training shapes of the per-particle distance, for each sample row."""
    n_tr = len(training)
    j = training.shape[1] // 3
    chunk = max(1, int(4_000_000 // max(1, n_tr * j)))
    out = np.empty(len(samples))
    tr = training.reshape(n_tr, j, 3)
    for s in range(0, len(samples), chunk):
        smp = samples[s:s + chunk].reshape(-1, 1, j, 3)
        d = np.linalg.norm(smp - tr[None], axis=-1)            # (C, I, J)
        agg = np.sqrt((d ** 2).mean(axis=-1)) if kind == "rms" else d.mean(axis=-1)
        out[s:s + chunk] = agg.min(axis=1)
    return out


def draw_coefficients(model: PcaShapeModel, n_samples: int, modes: int, seed=None,
                      distribution: str = "uniform") -> np.ndarray:
    """Mode coefficients: uniform in +/- 3 sqrt(lambda) or Gaussian with variance lambda."""
    if distribution not in DISTRIBUTIONS:
        raise ValidationError(f"distribution must be one of {DISTRIBUTIONS}")
    rng = np.random.default_rng(seed)
    sd = np.sqrt(np.clip(model.eigenvalues[:modes], 0.0, None))
    if distribution == "uniform":
        return rng.uniform(-1.0, 1.0, size=(n_samples, modes)) * (3.0 * sd)
    return rng.normal(size=(n_samples, modes)) * sd


def specificity(model: PcaShapeModel, ps, n_samples: int = 25000, modes: int | None = None,
                seed=0, distribution: str = "uniform", kind: str = "mean") -> float:
    """Mean over model samples of the distance to the closest training shape.

    Distances are mean per-particle Euclidean by default.
    """
    modes = model.n_modes if modes is None else int(modes)
    if not 0 <= modes <= model.n_modes:
        raise ValidationError(f"modes must lie in [0, {model.n_modes}]")
    coeffs = draw_coefficients(model, n_samples, modes, seed, distribution)
    samples = model.reconstruct(coeffs) if modes else np.tile(model.mean, (n_samples, 1))
    return float(_nearest_training_distance(samples, _flat(ps), kind).mean())


def specificity_curve(model, ps, n_samples: int = 25000, seed=0, distribution: str = "uniform",
                      kind: str = "mean") -> np.ndarray:
    return np.array([specificity(model, ps, n_samples, m, seed, distribution, kind)
                     for m in range(1, model.n_modes + 1)])


# ---------------------------------------------------------------------------
# warping and surface distances

@dataclass(frozen=True, eq=False)
class Warp:
    """Biharmonic RBF deformation with an affine term, one system for all three coordinates."""

    centers: np.ndarray     # normalized reference particles
    weights: np.ndarray     # (J, 3)
    affine: np.ndarray      # (4, 3)
    shift: np.ndarray
    scale: float

    def __call__(self, points) -> np.ndarray:
        p = (np.asarray(points, dtype=np.float64) - self.shift) / self.scale
        out = np.empty((len(p), 3))
        for s in range(0, len(p), 4096):
            q = p[s:s + 4096]
            out[s:s + 4096] = cdist(q, self.centers) @ self.weights + np.hstack(
                [np.ones((len(q), 1)), q]) @ self.affine
        return out


def fit_warp(reference_particles, target_particles) -> Warp:
    src = np.asarray(reference_particles, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target_particles, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValidationError(f"particle counts differ: {len(src)} vs {len(dst)}")
    n = len(src)
    if n < 4:
        raise RbfSolveError("warp needs at least 4 particles")
    shift = src.mean(axis=0)
    scale = float(np.ptp(src, axis=0).max()) or 1.0
    x = (src - shift) / scale
    pairs = cKDTree(x).query_pairs(1e-10, output_type="ndarray")
    if len(pairs):
        i, k = pairs[0]
        raise RbfSolveError(f"singular warp system: reference particles {i} and {k} coincide")
    a = np.zeros((n + 4, n + 4))
    a[:n, :n] = cdist(x, x)
    poly = np.hstack([np.ones((n, 1)), x])
    a[:n, n:] = poly
    a[n:, :n] = poly.T
    rhs = np.vstack([dst, np.zeros((4, 3))])
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            sol = scipy.linalg.solve(a, rhs, assume_a="sym", check_finite=False)
        except (scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
            raise RbfSolveError(f"singular warp system (condition estimate {np.linalg.cond(a):.3g})") from exc
    return Warp(x, sol[:n], sol[n:], shift, scale)


def warp_mesh(reference_mesh: TriangleMesh, reference_particles, target_particles) -> TriangleMesh:
    """Move every vertex of the reference mesh with the particle-driven warp."""
    warp = fit_warp(reference_particles, target_particles)
    return TriangleMesh.from_arrays(warp(reference_mesh.vertices), reference_mesh.faces, validate=False)


@dataclass(frozen=True, eq=False)
class SurfaceDistances:
    forward: np.ndarray    # ground-truth vertices to the reconstruction
    backward: np.ndarray   # reconstruction vertices to the ground truth

    @property
    def all(self) -> np.ndarray:
        return np.concatenate([self.forward, self.backward])

    @property
    def mean(self) -> float:
        return float(self.all.mean())

    @property
    def max(self) -> float:
        return float(self.all.max())


def surface_to_surface(ground_truth: TriangleMesh, reconstructed: TriangleMesh) -> SurfaceDistances:
    """Two-way vertex-to-surface distances, concatenated."""
    fwd = reconstructed.proximity.unsigned_distance(ground_truth.vertices)
    bwd = ground_truth.proximity.unsigned_distance(reconstructed.vertices)
    return SurfaceDistances(fwd, bwd)

"""Polyharmonic RBF implicit surfaces built from particles and normal dipoles.

The interpolant is

    f(x) = sum_k w_k phi(|x - site_k|) + c . x + c0

with phi(r) = r (biharmonic) or r**3 (triharmonic). Sites are the particles
(target 0) and their dipoles p +/- s n (targets +s / -s).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import RbfSolveError, ValidationError

KERNELS = ("biharmonic", "triharmonic")


def kernel_value(r: np.ndarray, kernel: str) -> np.ndarray:
    if kernel == "biharmonic":
        return r
    if kernel == "triharmonic":
        return r ** 3
    raise ValidationError(f"unknown kernel {kernel!r}")


def kernel_radial_derivative_over_r(r: np.ndarray, kernel: str) -> np.ndarray:
    """phi'(r) / r, with the biharmonic singularity at r = 0 mapped to 0."""
    if kernel == "biharmonic":
        with np.errstate(divide="ignore"):
            out = 1.0 / r
        out[r == 0] = 0.0
        return out
    if kernel == "triharmonic":
        return 3.0 * r
    raise ValidationError(f"unknown kernel {kernel!r}")


@dataclass(frozen=True, eq=False)
class RbfModel:
    sites: np.ndarray       # (N, 3)
    targets: np.ndarray     # (N,)
    weights: np.ndarray     # (N,)
    linear: np.ndarray      # (3,)
    constant: float
    kernel: str = "biharmonic"
    dipole_offset: float = 0.0

    def __call__(self, x) -> np.ndarray:
        return eval_rbf(self, x)

    def gradient(self, x) -> np.ndarray:
        return eval_rbf_grad(self, x)


def make_dipoles(particles, normals, s: float):
    """Sites [P, P+sN, P-sN] with targets [0, +s, -s]."""
    p = np.asarray(particles, dtype=np.float64).reshape(-1, 3)
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if p.shape != n.shape:
        raise ValidationError("particles and normals must have matching shapes")
    if not s > 0:
        raise RbfSolveError(f"dipole offset s must be positive (got {s}); the system would be degenerate")
    if not np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6):
        raise ValidationError("normals must be unit length")
    j = len(p)
    sites = np.concatenate([p, p + s * n, p - s * n])
    targets = np.concatenate([np.zeros(j), np.full(j, s), np.full(j, -s)])
    return sites, targets


def solve_rbf(sites, targets, kernel: str = "biharmonic", dipole_offset: float = 0.0) -> RbfModel:
    """Solve the symmetric (N+4) polyharmonic system with linear polynomial tail."""
    x = np.asarray(sites, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    n = len(x)
    if len(t) != n:
        raise ValidationError("one target per site is required")
    if n < 4:
        raise RbfSolveError(f"need at least 4 sites, got {n}")
    scale = float(np.ptp(x, axis=0).max()) or 1.0
    pairs = cKDTree(x).query_pairs(1e-10 * scale, output_type="ndarray")
    if len(pairs):
        i, k = pairs[0]
        raise RbfSolveError(f"singular RBF system: duplicate sites {i} and {k} (condition estimate inf)")
    poly = np.hstack([np.ones((n, 1)), x])
    sv = np.linalg.svd(poly - np.r_[0, x.mean(axis=0)], compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise RbfSolveError(f"singular RBF system: sites are coplanar "
                            f"(condition estimate {sv[0] / max(sv[-1], 1e-300):.3g})")

    a = np.zeros((n + 4, n + 4))
    a[:n, :n] = kernel_value(cdist(x, x), kernel)
    a[:n, n:] = poly
    a[n:, :n] = poly.T
    rhs = np.concatenate([t, np.zeros(4)])
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            sol = scipy.linalg.solve(a, rhs, assume_a="sym", check_finite=False)
        except (scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
            cond = np.linalg.cond(a)
            raise RbfSolveError(f"ill-conditioned RBF system (condition estimate {cond:.3g}): {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise RbfSolveError("RBF solve produced non-finite weights")
    w = sol[:n]
    return RbfModel(x, t, w, sol[n + 1:], float(sol[n]), kernel, float(dipole_offset))


def eval_rbf(model: RbfModel, x) -> np.ndarray:
    """Approximate signed distance at each row of x (scalar for a single point)."""
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    out = np.empty(len(pts))
    for s in range(0, len(pts), 4096):
        p = pts[s:s + 4096]
        out[s:s + 4096] = kernel_value(cdist(p, model.sites), model.kernel) @ model.weights
    out += pts @ model.linear + model.constant
    return out[0] if single else out


def eval_rbf_grad(model: RbfModel, x) -> np.ndarray:
    """Analytic gradient of `eval_rbf`; the biharmonic kernel contributes 0 at a site."""
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    out = np.empty((len(pts), 3))
    for s in range(0, len(pts), 1024):
        p = pts[s:s + 1024]
        diff = p[:, None, :] - model.sites[None, :, :]
        r = np.linalg.norm(diff, axis=2)
        coef = kernel_radial_derivative_over_r(r, model.kernel) * model.weights
        out[s:s + 1024] = np.einsum("nk,nkd->nd", coef, diff)
    out += model.linear
    return out[0] if single else out


def fit_surface(particles, normals, s: float, kernel: str = "biharmonic") -> RbfModel:
    sites, targets = make_dipoles(particles, normals, s)
    return solve_rbf(sites, targets, kernel, dipole_offset=s)

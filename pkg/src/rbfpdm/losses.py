"""Sampling, neighborhood-correspondence and eigenshape losses with analytic gradients.

Every loss returns ``(value, gradient)`` where the gradient has the shape of
the particle array it was given. Quantities refreshed once per epoch (RBF
weights and band errors, softmin temperature, normals, template neighborhoods,
running mean, eigenshape eps) are constants inside a step and are not
differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import NumericalError, ValidationError
from .rbf import RbfModel
from .sdf import SignedDistanceVolume


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0
    beta: float = 0.01
    gamma: float = 0.5
    c: float = 0.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValidationError("loss weights must be nonnegative")
        if not 0.0 <= self.c <= 1.0:
            raise ValidationError(f"adaptivity weight c must lie in [0, 1], got {self.c}")


@dataclass(frozen=True, eq=False)
class NarrowBandSamples:
    points: np.ndarray      # (R, 3)
    distances: np.ndarray   # (R,) true signed distance D(b)
    band: float

    def __len__(self):
        return len(self.points)


# ---------------------------------------------------------------------------
# sampling loss

def sample_narrow_band(sdf: SignedDistanceVolume, count: int, s: float, rng_seed=None) -> NarrowBandSamples:
    """Uniform rejection samples inside voxels whose node value satisfies |D| <= s."""
    if count < 1:
        raise ValidationError("need at least one narrow-band sample")
    rng = np.random.default_rng(rng_seed)
    vals = sdf.values
    cand = np.argwhere(np.abs(vals) <= s)
    if len(cand) < count:
        raise ValidationError(f"only {len(cand)} narrow-band voxels for {count} requested samples "
                              f"(band {s:g}, spacing {sdf.max_spacing:g})")
    centers = sdf.origin + cand * sdf.spacing
    lo, hi = sdf.origin, sdf.upper
    got_p, got_d = [], []
    n_got = 0
    for _ in range(1000):
        k = rng.integers(0, len(cand), size=2 * (count - n_got) + 16)
        p = centers[k] + (rng.random((len(k), 3)) - 0.5) * sdf.spacing
        p = np.clip(p, lo, hi)
        d = sdf.query(p)
        ok = np.abs(d) <= s
        got_p.append(p[ok])
        got_d.append(d[ok])
        n_got += int(ok.sum())
        if n_got >= count:
            break
    else:
        raise NumericalError("narrow-band rejection sampling failed to converge")
    pts = np.concatenate(got_p)[:count]
    dist = np.concatenate(got_d)[:count]
    return NarrowBandSamples(pts, dist, float(s))


def median_spacing(particles) -> float:
    """Median distance from each particle to its nearest other particle."""
    p = np.asarray(particles).reshape(-1, 3)
    d, _ = cKDTree(p).query(p, k=2)
    return float(np.median(d[:, 1]))


def softmin_rows(k: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise exp(-k/tau) / sum exp(-k'/tau)."""
    z = -(k - k.min(axis=1, keepdims=True)) / tau
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def band_errors(model: RbfModel, band: NarrowBandSamples) -> np.ndarray:
    """Squared reconstruction error (f(b) - D(b))^2 at each band point."""
    return (model(band.points) - band.distances) ** 2


def sampling_loss(particles, normals, model: RbfModel, band: NarrowBandSamples, c: float,
                  tau: float | None = None):
    """mean( softmin(K) * K * (c E + (1 - c)) ) over the R x J band/particle matrix.

    `tau` is the softmin temperature; it defaults to the median nearest-particle
    spacing. The per-point errors E come from `model`, which was solved on
    the current particles; like tau they are data within a step, so E only
    scales how strongly each band point attracts nearby particles. With c = 0
    the model is not used at all. `normals` is accepted for symmetry with the
    other losses and does not enter the value.
    """
    p = np.asarray(particles, dtype=np.float64)
    b = band.points
    rr, jj = len(b), len(p)
    if rr == 0:
        raise ValidationError("narrow band has no samples")
    if not 0.0 <= c <= 1.0:
        raise ValidationError(f"adaptivity weight c must lie in [0, 1], got {c}")
    if tau is None:
        tau = median_spacing(p)

    diff = p[None, :, :] - b[:, None, :]            # (R, J, 3)
    k = np.sqrt(np.einsum("rjd,rjd->rj", diff, diff))
    s = softmin_rows(k, tau)
    g = (s * k).sum(axis=1)                         # softmin-weighted distance per row
    if c > 0:
        weight = c * band_errors(model, band) + (1.0 - c)
    else:
        weight = np.ones(rr)
    scale = 1.0 / (rr * jj)
    loss = scale * float(weight @ g)

    dg_dk = s * (1.0 - (k - g[:, None]) / tau)
    # d k / d p is the unit vector diff / k, taken as 0 where a band point sits on a particle
    coef = np.divide(scale * weight[:, None] * dg_dk, k, out=np.zeros_like(k), where=k > 0)
    grad = np.einsum("rj,rjd->jd", coef, diff)
    return loss, grad


# ---------------------------------------------------------------------------
# neighborhood correspondence loss

def minimal_rotation(normals) -> np.ndarray:
    """Rotations taking each unit normal onto (1, 0, 0) by the shortest arc.

    The antipodal case n = (-1, 0, 0) uses a rotation by pi about (0, 0, 1).
    """
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    v = np.stack([np.zeros(len(n)), n[:, 2], -n[:, 1]], axis=1)   # n x e1
    cth = n[:, 0]
    vx = np.zeros((len(n), 3, 3))
    vx[:, 0, 1], vx[:, 0, 2] = -v[:, 2], v[:, 1]
    vx[:, 1, 0], vx[:, 1, 2] = v[:, 2], -v[:, 0]
    vx[:, 2, 0], vx[:, 2, 1] = -v[:, 1], v[:, 0]
    anti = cth < -1.0 + 1e-12
    denom = np.where(anti, 1.0, 1.0 + cth)
    rot = np.eye(3)[None] + vx + vx @ vx / denom[:, None, None]
    rot[anti] = np.diag([-1.0, -1.0, 1.0])
    return rot


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """x -> rotation @ (x - origin) * scale."""

    rotation: np.ndarray
    origin: np.ndarray
    scale: float

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (x - self.origin) @ self.rotation.T * self.scale

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation * self.scale
        m[:3, 3] = -self.rotation @ self.origin * self.scale
        return m


def neighborhood_transform(p, n, neighbor_points) -> SimilarityTransform:
    """Translate by -p, rotate n onto (1, 0, 0), scale by 1 / mean neighbor distance."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    nb = np.asarray(neighbor_points, dtype=np.float64).reshape(-1, 3)
    mean_d = float(np.linalg.norm(nb - p, axis=1).mean())
    if not mean_d > 0:
        raise NumericalError("neighbors coincide with the center point (zero mean distance)")
    return SimilarityTransform(minimal_rotation(n)[0], p, 1.0 / mean_d)


MATCH_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class NeighborhoodTemplate:
    index: int                # template shape index in the cohort
    neighbors: np.ndarray     # (J, q) particle indices, never j itself


def build_template(template_particles, index: int, q: int = 6) -> NeighborhoodTemplate:
    """q nearest Euclidean neighbors of every template particle."""
    p = np.asarray(template_particles).reshape(-1, 3)
    q = min(q, len(p) - 1)
    if q < 1:
        raise ValidationError("need at least two particles for neighborhoods")
    _, idx = cKDTree(p).query(p, k=q + 1)
    nb = np.empty((len(p), q), dtype=np.int64)
    for j in range(len(p)):
        row = [k for k in idx[j] if k != j][:q]
        nb[j] = row
    return NeighborhoodTemplate(int(index), nb)


@dataclass
class _Frame:
    """Neighborhood frames; leading batch axes (shapes) are allowed before J."""

    rot: np.ndarray    # (..., J, 3, 3)
    x: np.ndarray      # (..., J, q, 3) neighbor offsets
    dist: np.ndarray   # (..., J, q)
    m: np.ndarray      # (..., J) mean neighbor distance
    y: np.ndarray      # (..., J, q, 3) transformed neighbors


def _frame(p, normals, nb) -> _Frame:
    rot = minimal_rotation(normals.reshape(-1, 3)).reshape(normals.shape + (3,))
    x = p[..., nb, :] - p[..., :, None, :]
    dist = np.sqrt(np.einsum("...d,...d->...", x, x))
    m = dist.mean(axis=-1)
    if np.any(m <= 0):
        j = int(np.argmin(m.reshape(-1))) % m.shape[-1]
        raise NumericalError(f"particle {j}: neighbors coincide (zero mean distance)")
    y = np.einsum("...jab,...jqb->...jqa", rot, x) / m[..., None, None]
    return _Frame(rot, x, dist, m, y)


def _scatter_add(nb, values) -> np.ndarray:
    """out[..., nb[j, q], :] += values[..., j, q, :]; bincount beats np.add.at here."""
    n = nb.shape[0]
    lead = values.shape[:-3]
    k = int(np.prod(lead, dtype=np.int64))
    idx = (np.arange(k)[:, None, None] * n + nb[None]).ravel()
    v = values.reshape(-1, 3)
    out = np.stack([np.bincount(idx, weights=v[:, d], minlength=k * n) for d in range(3)], axis=1)
    return out.reshape(lead + (n, 3))


def _frame_backprop(fr: _Frame, nb, gy) -> np.ndarray:
    """Gradient w.r.t. particle positions given d loss / d y."""
    q = nb.shape[1]
    a = np.einsum("...jba,...jqb->...jqa", fr.rot, gy) / fr.m[..., None, None]
    kappa = np.einsum("...jqa,...jqa->...j", gy, fr.y) / fr.m
    ehat = np.divide(-fr.x, fr.dist[..., None], out=np.zeros_like(fr.x), where=fr.dist[..., None] > 0)
    b = (kappa / q)[..., None, None] * ehat
    return _scatter_add(nb, a + b) - a.sum(axis=-2) - b.sum(axis=-2)


def _pair_term(fi: _Frame, ft: _Frame):
    """Loss between shape neighborhoods and the template's, plus dL/dy_i and dL/dy_t.

    Each transformed neighborhood is additionally rotated about the x axis
    (the aligned normal) by the angle that best matches the template in the
    least-squares sense, so that the comparison ignores any rotation. dL/dy_t
    is summed over the leading shape axes.

    The distance |z - v| has a kink at zero whose subgradient is any unit
    vector. Residuals below MATCH_TOL (the coordinates are scale-free, of
    order 1) count as exact matches and get the zero subgradient, so rounding
    differences between identical shapes do not turn into full-size steps.
    """
    y, v = fi.y, ft.y
    a = (y[..., 1] * v[..., 1] + y[..., 2] * v[..., 2]).sum(axis=-1)
    b = (y[..., 1] * v[..., 2] - y[..., 2] * v[..., 1]).sum(axis=-1)
    theta = np.arctan2(b, a)
    ct, st = np.cos(theta)[..., None], np.sin(theta)[..., None]
    z = np.stack([y[..., 0], ct * y[..., 1] - st * y[..., 2], st * y[..., 1] + ct * y[..., 2]], axis=-1)
    d = z - v
    ell = np.sqrt(np.einsum("...d,...d->...", d, d))
    loss = float(ell.sum())
    u = np.divide(d, ell[..., None], out=np.zeros_like(d), where=ell[..., None] > MATCH_TOL)
    h = (-u[..., 1] * z[..., 2] + u[..., 2] * z[..., 1]).sum(axis=-1)
    qq = a * a + b * b
    hq = np.divide(h, qq, out=np.zeros_like(h), where=qq > 0)[..., None]
    a_, b_ = a[..., None], b[..., None]
    gy = np.stack([u[..., 0], ct * u[..., 1] + st * u[..., 2], -st * u[..., 1] + ct * u[..., 2]], axis=-1)
    gy[..., 1] += hq * (a_ * v[..., 2] - b_ * v[..., 1])
    gy[..., 2] += hq * (-a_ * v[..., 1] - b_ * v[..., 2])
    gv = -u
    gv[..., 1] += hq * (-a_ * y[..., 2] - b_ * y[..., 1])
    gv[..., 2] += hq * (a_ * y[..., 1] - b_ * y[..., 2])
    return loss, gy, gv.reshape((-1,) + ft.y.shape).sum(axis=0)


def correspondence_loss(particles, normals, template: NeighborhoodTemplate,
                        template_particles, template_normals, template_slot: int | None = None):
    """Sum over shapes, particles j and template neighbors n of
    |T_i(p_in) - T_t(p_tn)|, with T the neighborhood similarity transform.

    `particles` / `normals` are (K, J, 3) for the minibatch. When the template
    shape is part of the minibatch, `template_slot` gives its row; its own term
    is zero and it receives the gradient of the other shapes' terms.
    """
    p = np.asarray(particles, dtype=np.float64)
    nrm = np.asarray(normals, dtype=np.float64)
    tp = np.asarray(template_particles, dtype=np.float64)
    tn = np.asarray(template_normals, dtype=np.float64)
    nb = template.neighbors
    grad = np.zeros_like(p)
    rows = np.array([i for i in range(len(p)) if i != template_slot], dtype=np.int64)
    if len(rows) == 0:
        return 0.0, grad
    ft = _frame(tp, tn, nb)
    fi = _frame(p[rows], nrm[rows], nb)
    total, gy, gv = _pair_term(fi, ft)
    grad[rows] = _frame_backprop(fi, nb, gy)
    if template_slot is not None:
        grad[template_slot] += _frame_backprop(ft, nb, gv)
    return total, grad


# ---------------------------------------------------------------------------
# eigenshape loss

def regularizer_eps(flat_particles) -> float:
    """1e-6 x the per-coordinate variance of particle positions about each shape's centroid.

    This ties eps to the size of the shapes rather than to their spread
    around the mean, so it stays positive when all shapes coincide and
    scales like the scatter under a change of units.
    """
    x = np.asarray(flat_particles, dtype=np.float64)
    p = x.reshape(len(x), -1, 3)
    y = p - p.mean(axis=1, keepdims=True)
    trace = float((y * y).sum()) / len(x)
    return max(1e-6 * trace / x.shape[1], 1e-300)


def eigenshape_loss(flat_particles, mu, eps: float | None = None):
    """0.5 log det( (1/(3JK)) sum_k (P_k - mu)(P_k - mu)^T + eps I ).

    Evaluated through the K x K Gram matrix. `eps` defaults to
    `regularizer_eps` of the batch and is a constant of the gradient.
    """
    x = np.asarray(flat_particles, dtype=np.float64)
    kk, dim = x.shape
    if kk < 2:
        raise ValidationError(f"eigenshape loss needs at least 2 shapes in the minibatch, got {kk}")
    y = x - np.asarray(mu, dtype=np.float64).reshape(1, dim)
    if eps is None:
        eps = regularizer_eps(x)
    norm = dim * kk
    if kk <= dim:
        gram = y @ y.T / norm
        lam, u = np.linalg.eigh(gram)
        lam = np.clip(lam, 0.0, None)
        loss = 0.5 * (np.log(lam + eps).sum() + (dim - kk) * np.log(eps))
        inv = (u / (lam + eps)) @ u.T
        grad = inv @ y / norm
    else:
        scat = y.T @ y / norm
        lam, u = np.linalg.eigh(scat)
        lam = np.clip(lam, 0.0, None)
        loss = 0.5 * np.log(lam + eps).sum()
        grad = y @ ((u / (lam + eps)) @ u.T) / norm
    return float(loss), grad


# ---------------------------------------------------------------------------
# total loss

@dataclass(eq=False)
class Minibatch:
    """Everything the total loss needs for one step over K shapes."""

    particles: np.ndarray                 # (K, J, 3)
    normals: np.ndarray                   # (K, J, 3)
    models: list                          # K RbfModels
    bands: list                           # K NarrowBandSamples
    taus: np.ndarray                      # (K,)
    template: NeighborhoodTemplate | None = None
    template_particles: np.ndarray | None = None
    template_normals: np.ndarray | None = None
    template_slot: int | None = None
    mu: np.ndarray | None = None
    eps: float | None = None
    components: dict = field(default_factory=dict)


def total_loss(batch: Minibatch, weights: LossWeights, epoch: int, executor=None):
    """alpha * sum_i sampling_i + beta * eigenshape + gamma * correspondence.

    Epochs are 1-based; epoch 1 is burn-in and uses the sampling term only.
    Per-loss values are stored in ``batch.components``.
    """
    p = batch.particles
    kk = len(p)
    grad = np.zeros_like(p)
    comps = {"sampling": 0.0, "eigenshape": 0.0, "correspondence": 0.0}

    def one(i):
        return sampling_loss(p[i], batch.normals[i], batch.models[i], batch.bands[i],
                             weights.c, batch.taus[i])

    if weights.alpha > 0:
        results = list(executor.map(one, range(kk))) if executor else [one(i) for i in range(kk)]
        for i, (val, g) in enumerate(results):
            comps["sampling"] += val
            grad[i] += weights.alpha * g
    burn_in = epoch <= 1
    if not burn_in and weights.beta > 0 and kk >= 2:
        mu = batch.mu if batch.mu is not None else p.reshape(kk, -1).mean(axis=0)
        val, g = eigenshape_loss(p.reshape(kk, -1), mu, batch.eps)
        comps["eigenshape"] = val
        grad += weights.beta * g.reshape(p.shape)
    if not burn_in and weights.gamma > 0 and batch.template is not None:
        val, g = correspondence_loss(p, batch.normals, batch.template, batch.template_particles,
                                     batch.template_normals, batch.template_slot)
        comps["correspondence"] = val
        grad += weights.gamma * g
    total = (weights.alpha * comps["sampling"] + weights.beta * comps["eigenshape"]
             + weights.gamma * comps["correspondence"])
    batch.components = comps
    if not np.isfinite(total) or not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite loss or gradient at epoch {epoch}: {comps}")
    return total, grad

"""Two-stage minibatch gradient descent on the combined particle loss.

Stage 1 (c = 0) spreads particles uniformly while the correspondence and
eigenshape terms align them; the geodesic regularizer runs every few epochs
and doubles as the convergence test. Stage 2 turns on adaptivity (c > 0)
without the regularizer.

Per epoch: normals from the distance-volume gradient, RBF re-solve (only
when c > 0), narrow-band resampling, softmin temperature, template
neighborhoods, running mean and eigenshape eps. Per iteration: one
plain gradient step on a minibatch of shapes, per-particle step clipping,
then snapping back onto the surface.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import NumericalError, ValidationError
from .geodesy import GeodesicIndex
from .losses import (LossWeights, Minibatch, build_template, median_spacing, sample_narrow_band,
                     regularizer_eps, total_loss)
from .rbf import KERNELS, fit_surface
from .regularizer import converged, mismatch_report, regularize
from .shapes import ParticleSystem
from .snap import snap_points, snap_to_surface

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("stage", "epoch", "total", "sampling", "eigenshape", "correspondence",
               "max_movement", "mismatched")


@dataclass
class OptimizationConfig:
    learning_rate: float = 1.0
    alpha_stage1: float = 10.0
    alpha_stage2: float = 5.0
    beta: float = 0.01
    gamma: float = 0.5
    c_stage2: float = 0.5
    regularizer_interval: int = 25
    stage1_max_epochs: int = 500
    stage2_epochs: int = 200
    minibatch: int | None = None          # default min(I, 8)
    band_samples: int | None = None       # R; default max(1024, 8J)
    dipole_offset: float | None = None    # s; default 2 x the coarsest voxel spacing
    neighbors: int = 6                    # q
    mismatch_tolerance: int = 0
    movement_tolerance: float = 1e-3      # fraction of the median particle spacing
    step_clip: float = 2.0                # fraction of the median particle spacing
    running_mean_decay: float = 0.9
    kernel: str = "biharmonic"
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "alpha_stage1", "alpha_stage2", "beta", "gamma",
                     "movement_tolerance", "step_clip"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if not 0.0 < self.c_stage2 <= 1.0:
            raise ValidationError(f"c_stage2 must lie in (0, 1], got {self.c_stage2}")
        if self.minibatch is not None and self.minibatch < 2:
            raise ValidationError("minibatch size K must be >= 2")
        if self.regularizer_interval < 1 or self.stage1_max_epochs < 0 or self.stage2_epochs < 0:
            raise ValidationError("epoch counts must be nonnegative and the interval positive")
        if self.dipole_offset is not None and not self.dipole_offset > 0:
            raise ValidationError("dipole_offset must be positive")
        if self.kernel not in KERNELS:
            raise ValidationError(f"kernel must be one of {KERNELS}")
        if not 0.0 <= self.running_mean_decay < 1.0:
            raise ValidationError("running_mean_decay must lie in [0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown optimization settings: {sorted(unknown)}")
        # YAML reads 1e-5 as a string, so coerce by the declared field type
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, val in data.items():
            kind = types[key]
            try:
                if val is None or kind == "str":
                    out[key] = val
                elif "float" in kind:
                    out[key] = float(val)
                else:
                    out[key] = int(val)
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{key}: cannot use {val!r}") from exc
            if val is None and "None" not in kind:
                raise ValidationError(f"{key} may not be empty")
        return cls(**out)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StageResult:
    particles: ParticleSystem
    epochs: int
    converged: bool
    history: list = field(default_factory=list)   # one dict per epoch (LOG_COLUMNS)


class EpochLog:
    """CSV progress log; `None` path keeps rows in memory only."""

    def __init__(self, path=None):
        self.rows = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=LOG_COLUMNS)
            self._writer.writeheader()

    def write(self, row: dict):
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow(row)
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def particle_normals(shape, points) -> np.ndarray:
    """Unit outward normals from the distance-volume gradient (mesh normal where it vanishes)."""
    g = shape.sdf.gradient(points)
    n = np.linalg.norm(g, axis=1)
    weak = n < 1e-9
    if np.any(weak):
        _, _, face, _ = shape.mesh.proximity.closest_points(points[weak])
        g[weak] = shape.mesh.face_normals[face]
        n[weak] = np.linalg.norm(g[weak], axis=1)
    return g / n[:, None]


def minibatches(rng, n_shapes: int, k: int) -> list[np.ndarray]:
    """Shapes drawn without replacement, split into max(1, I // K) nearly equal batches."""
    order = rng.permutation(n_shapes)
    return [b for b in np.array_split(order, max(1, n_shapes // k)) if len(b)]


def clip_steps(step: np.ndarray, limit: float) -> np.ndarray:
    """Scale down any per-particle step longer than `limit`."""
    norm = np.linalg.norm(step, axis=-1, keepdims=True)
    scale = np.minimum(1.0, limit / np.maximum(norm, 1e-300))
    return step * scale


class _Context:
    """Per-stage settings derived from the cohort and configuration."""

    def __init__(self, cohort, ps, config, reference, indices, executor):
        if len(cohort) != ps.n_shapes:
            raise ValidationError(f"{len(cohort)} shapes but {ps.n_shapes} particle sets")
        if ps.n_shapes < 2:
            raise ValidationError("optimization needs >= 2 shapes")
        self.cohort = cohort
        self.config = config
        self.reference = int(reference)
        self.executor = executor
        self.indices = indices
        j = ps.n_particles
        self.k = min(ps.n_shapes, config.minibatch or 8)
        self.r = config.band_samples or max(1024, 8 * j)
        if self.r < j:
            raise ValidationError(f"band_samples R={self.r} must be >= J={j}")
        self.s = config.dipole_offset or 2.0 * max(s.sdf.max_spacing for s in cohort)

    def map(self, fn, items):
        items = list(items)
        if self.executor is None:
            return [fn(x) for x in items]
        return list(self.executor.map(fn, items))

    def geodesic_indices(self):
        if self.indices is None:
            self.indices = [GeodesicIndex(s.mesh) for s in self.cohort]
        return self.indices


def _epoch_rng(config, stage: int, epoch: int):
    return np.random.default_rng(np.random.SeedSequence([config.seed, stage, epoch]))


def _run_stage(ctx: _Context, ps: ParticleSystem, stage: int, weights: LossWeights, max_epochs: int,
               log: EpochLog | None, callback, regularize_every: int | None,
               movement_tolerance: float | None, warm_epochs: int = 0) -> StageResult:
    cfg = ctx.config
    cohort = ctx.cohort
    ps = snap_to_surface(ps, cohort)
    n_shapes = ps.n_shapes
    mu = ps.flat().mean(axis=0)
    history = []
    done = False
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        global_epoch = warm_epochs + epoch
        rng = _epoch_rng(cfg, stage, epoch)
        # one band seed for all shapes: identical volumes then get identical samples
        band_seed = int(rng.integers(0, 2 ** 63 - 1))
        normals = np.stack(ctx.map(lambda i: particle_normals(cohort[i], ps.particles[i]), range(n_shapes)))
        if weights.c > 0:
            models = ctx.map(lambda i: fit_surface(ps.particles[i], normals[i], ctx.s, cfg.kernel),
                             range(n_shapes))
        else:
            models = [None] * n_shapes
        bands = ctx.map(lambda i: sample_narrow_band(cohort[i].sdf, ctx.r, ctx.s, band_seed),
                        range(n_shapes))
        taus = np.array([median_spacing(p) for p in ps.particles])
        template = build_template(ps.particles[ctx.reference], ctx.reference, cfg.neighbors)
        mu = cfg.running_mean_decay * mu + (1 - cfg.running_mean_decay) * ps.flat().mean(axis=0)
        eps = regularizer_eps(ps.flat())

        sums = {"total": 0.0, "sampling": 0.0, "eigenshape": 0.0, "correspondence": 0.0}
        max_move = 0.0
        for it, batch_ids in enumerate(minibatches(rng, n_shapes, ctx.k)):
            slot = np.flatnonzero(batch_ids == ctx.reference)
            batch = Minibatch(
                particles=ps.particles[batch_ids].copy(),
                normals=normals[batch_ids],
                models=[models[i] for i in batch_ids],
                bands=[bands[i] for i in batch_ids],
                taus=taus[batch_ids],
                template=template,
                template_particles=ps.particles[ctx.reference].copy(),
                template_normals=normals[ctx.reference],
                template_slot=int(slot[0]) if len(slot) else None,
                mu=mu, eps=eps)
            try:
                value, grad = total_loss(batch, weights, global_epoch, ctx.executor)
            except NumericalError as exc:
                ids = [ps.shape_ids[i] for i in batch_ids]
                raise NumericalError(f"stage {stage} epoch {epoch} shapes {ids}: {exc}") from exc
            sums["total"] += value
            for key, val in batch.components.items():
                sums[key] += val
            for b, i in enumerate(batch_ids):
                step = clip_steps(-cfg.learning_rate * grad[b], cfg.step_clip * taus[i])
                moved, _ = snap_points(cohort[i], ps.particles[i] + step)
                max_move = max(max_move, float(np.linalg.norm(moved - ps.particles[i], axis=1).max()))
                ps.particles[i] = moved
            if callback is not None:
                callback(stage, epoch, it, ps)

        mismatched = ""
        if regularize_every and epoch % regularize_every == 0:
            indices = ctx.geodesic_indices()
            ps = snap_to_surface(regularize(ps, indices, ctx.reference, executor=ctx.executor), cohort)
            if callback is not None:
                callback(stage, epoch, -1, ps)
            report = mismatch_report(ps, indices, ctx.reference)
            mismatched = report.total
            done = converged(report, cfg.mismatch_tolerance)
        elif movement_tolerance is not None and max_move < movement_tolerance * float(np.median(taus)):
            done = True
        row = {"stage": stage, "epoch": epoch, **sums, "max_movement": max_move, "mismatched": mismatched}
        history.append(row)
        if log is not None:
            log.write(row)
        logger.info("stage %d epoch %d loss %.6g move %.3g", stage, epoch, sums["total"], max_move)
        if done:
            break
    return StageResult(ps, epoch, done, history)


def run_stage1(cohort, ps: ParticleSystem, config: OptimizationConfig, reference: int,
               indices=None, log: EpochLog | None = None, callback=None, executor=None) -> StageResult:
    """Uniform sampling plus correspondence (c = 0); regularize and test convergence
    every `regularizer_interval` epochs. Epoch 1 is the burn-in (sampling only)."""
    ctx = _Context(cohort, ps, config, reference, indices, executor)
    weights = LossWeights(config.alpha_stage1, config.beta, config.gamma, 0.0)
    return _run_stage(ctx, ps.copy(), 1, weights, config.stage1_max_epochs, log, callback,
                      config.regularizer_interval, None)


def run_adaptive(cohort, ps: ParticleSystem, config: OptimizationConfig, reference: int, c: float,
                 log: EpochLog | None = None, callback=None, executor=None) -> StageResult:
    """The stage-2 loop for any c in [0, 1]; c = 0 is the matching uniform-sampling baseline."""
    if not 0.0 <= c <= 1.0:
        raise ValidationError(f"c must lie in [0, 1], got {c}")
    ctx = _Context(cohort, ps, config, reference, None, executor)
    weights = LossWeights(config.alpha_stage2, config.beta, config.gamma, c)
    # stage 2 follows a finished stage 1, so it is never in burn-in
    return _run_stage(ctx, ps.copy(), 2, weights, config.stage2_epochs, log, callback, None,
                      config.movement_tolerance, warm_epochs=1)


def run_stage2(cohort, ps: ParticleSystem, config: OptimizationConfig, reference: int,
               c: float | None = None, log: EpochLog | None = None, callback=None,
               executor=None) -> StageResult:
    """Adaptive sampling with c in (0, 1], no regularizer, early stop on small movement."""
    c = config.c_stage2 if c is None else c
    if not 0.0 < c <= 1.0:
        raise ValidationError(f"stage 2 needs c in (0, 1], got {c}")
    return run_adaptive(cohort, ps, config, reference, c, log, callback, executor)

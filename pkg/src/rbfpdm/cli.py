"""Command line entry point.

Exit status: 0 on success, 1 on invalid input or a failed convergence /
correspondence check, 2 on a numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

from .config import CohortConfig, ShapeEntry, dump_config, load_config
from .errors import NumericalError, ValidationError
from .geodesy import GeodesicIndex
from .optimizer import OptimizationConfig
from .pipeline import (evaluate, load_cohort, load_meshes, read_particles, reconstruct, reference_index,
                       run_init, run_optimize)
from .regularizer import converged, mismatch_report
from .synthetic import FAMILIES, generate, read_manifest, write_cohort

logger = logging.getLogger("rbfpdm")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

# Settings written into configs for generated cohorts (about 100 mm across).
SYNTHETIC_SPACING = 5.0
SYNTHETIC_OPTIMIZATION = dict(learning_rate=4000.0, beta=1e-5, gamma=4e-4, step_clip=0.5,
                              stage1_max_epochs=50, stage2_epochs=60)


@contextmanager
def _executor(args):
    if args.serial or args.threads == 1:
        yield None
        return
    n = args.threads or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=n) as pool:
        yield pool


def cmd_generate_synthetic(args) -> int:
    cohort = generate(args.family, args.count, args.seed, args.subdivisions)
    out = Path(args.out_dir)
    manifest = write_cohort(cohort, out)
    shapes = [ShapeEntry(e["id"], e["mesh"]) for e in read_manifest(manifest)["shapes"]]
    if len(shapes) >= 2:
        cfg = CohortConfig(shapes=shapes, particles=args.particles, output="output", seed=args.seed,
                           spacing=SYNTHETIC_SPACING, padding=4 * SYNTHETIC_SPACING,
                           optimization=OptimizationConfig(**SYNTHETIC_OPTIMIZATION))
        dump_config(cfg, out / "config.yaml")
    print(f"wrote {len(shapes)} {args.family} meshes and {manifest.name} to {out}")
    return EXIT_OK


def cmd_init(args) -> int:
    cfg = load_config(args.config)
    with _executor(args) as ex:
        cohort = load_cohort(cfg, ex)
        init, info = run_init(cfg, cohort, executor=ex)
    print(f"reference shape: {info['reference']}")
    print(f"particles written to {cfg.output_dir / 'particles_init'}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = load_config(args.config)
    with _executor(args) as ex:
        _, info = run_optimize(cfg, ex)
    print(f"reference shape: {info['reference']}")
    print(f"stage 1: {info['stage1_epochs']} epochs, converged: {info['stage1_converged']}")
    print(f"stage 2: {info['stage2_epochs']} epochs")
    print(f"final particles in {cfg.output_dir / 'particles_final'}")
    if not info["stage1_converged"]:
        print(f"stage 1 did not meet the mismatch tolerance "
              f"({cfg.optimization.mismatch_tolerance}) within {cfg.optimization.stage1_max_epochs} epochs",
              file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    particles = Path(args.particles_dir)
    out = Path(args.out) if args.out else particles.parent / f"evaluation_{particles.name}"
    summary = evaluate(cfg, particles, out, args.samples, args.distribution, args.reference, args.plot)
    print((out / "summary.txt").read_text(), end="")
    logger.debug("summary %s", summary)
    return EXIT_OK


def cmd_check_correspondence(args) -> int:
    cfg = load_config(args.config)
    cohort = load_meshes(cfg)
    ps = read_particles(cfg, args.particles_dir)
    ref = reference_index(cfg, cohort, args.particles_dir, args.reference)
    report = mismatch_report(ps, [GeodesicIndex(s.mesh) for s in cohort], ref)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK if converged(report, args.tolerance) else EXIT_INVALID


def cmd_reconstruct(args) -> int:
    cfg = load_config(args.config)
    particles = Path(args.particles_dir)
    out = Path(args.out) if args.out else particles.parent / "reconstructions"
    paths = reconstruct(cfg, particles, out, args.reference)
    print(f"wrote {len(paths)} meshes to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rbfpdm", description="Particle-based shape correspondence with "
                                "RBF surface sampling and geodesic regularization.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads (default: all cores)")
    p.add_argument("--serial", action="store_true", help="single thread, bit-reproducible")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-synthetic", help="write a parametric cohort, manifest and config")
    g.add_argument("family", choices=FAMILIES)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--subdivisions", type=int, default=4, help="icosphere level of every mesh")
    g.add_argument("--particles", type=int, default=64, help="J written into config.yaml")
    g.add_argument("out_dir")
    g.set_defaults(func=cmd_generate_synthetic)

    for name, func, text in (("init", cmd_init, "initial particles only"),
                             ("optimize", cmd_optimize, "initialize, stage 1 and stage 2")):
        s = sub.add_parser(name, help=text)
        s.add_argument("config")
        s.set_defaults(func=func)

    def with_particles(s):
        s.add_argument("particles_dir")
        s.add_argument("config")
        s.add_argument("--reference", help="reference shape id (default: run record, else ICP medoid)")

    e = sub.add_parser("evaluate", help="compactness, generalization, specificity, surface distances")
    with_particles(e)
    e.add_argument("--out", help="output directory (default: evaluation_<particles dir> beside it)")
    e.add_argument("--samples", type=int, default=25000, help="specificity samples per mode count")
    e.add_argument("--distribution", choices=("uniform", "gaussian"), default="uniform")
    e.add_argument("--plot", action="store_true", help="also write metrics.png")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("check-correspondence", help="geodesic-neighborhood mismatch report")
    with_particles(c)
    c.add_argument("--tolerance", type=int, default=0, help="allowed mismatched particles per shape")
    c.add_argument("--out", help="also write the CSV here")
    c.set_defaults(func=cmd_check_correspondence)

    r = sub.add_parser("reconstruct", help="warp the reference mesh onto every shape's particles")
    with_particles(r)
    r.add_argument("--out", help="output directory (default: reconstructions beside the particles)")
    r.set_defaults(func=cmd_reconstruct)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

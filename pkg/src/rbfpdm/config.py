"""Cohort configuration files (YAML).

A minimal file lists the shapes and the particle count; everything else has
a default. Relative paths are resolved against the directory holding the
file, and are written back unchanged, so load -> dump -> load is the
identity.

    shapes:
      - {id: femur01, mesh: meshes/femur01.obj}
      - {id: femur02, mesh: meshes/femur02.obj, sdf: volumes/femur02.sdf}
    particles: 128
    optimization:
      gamma: 0.1
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .errors import ConfigError, ValidationError
from .optimizer import OptimizationConfig

TOP_LEVEL = ("shapes", "particles", "output", "seed", "reference", "spacing", "padding", "optimization")


@dataclass(frozen=True)
class ShapeEntry:
    id: str
    mesh: str
    sdf: str | None = None


@dataclass
class CohortConfig:
    shapes: list
    particles: int
    output: str = "output"
    seed: int = 0
    reference: str | None = None       # shape id; default is the ICP medoid
    spacing: float | None = None       # voxel size when an SDF is built from the mesh
    padding: float | None = None
    optimization: OptimizationConfig = field(default_factory=OptimizationConfig)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def __post_init__(self):
        if self.particles < 4:
            raise ConfigError(f"particles must be >= 4, got {self.particles}")
        ids = [s.id for s in self.shapes]
        if len(set(ids)) != len(ids):
            raise ConfigError("shape ids must be unique")
        if self.reference is not None and self.reference not in ids:
            raise ConfigError(f"reference {self.reference!r} is not a shape id")
        if self.spacing is not None and not self.spacing > 0:
            raise ConfigError("spacing must be positive")
        if self.optimization.seed != self.seed:
            self.optimization = replace(self.optimization, seed=self.seed)

    @property
    def shape_ids(self) -> list[str]:
        return [s.id for s in self.shapes]

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.output)

    def check_files(self):
        """Every referenced mesh and volume must exist; raises naming the first missing one."""
        for s in self.shapes:
            for kind, path in (("mesh", s.mesh), ("sdf", s.sdf)):
                if path is not None and not self.resolve(path).is_file():
                    raise ConfigError(f"shape {s.id}: {kind} file not found: {self.resolve(path)}")

    def to_dict(self) -> dict:
        opt = self.optimization.to_dict()
        opt.pop("seed")
        shapes = []
        for s in self.shapes:
            entry = {"id": s.id, "mesh": s.mesh}
            if s.sdf is not None:
                entry["sdf"] = s.sdf
            shapes.append(entry)
        return {"shapes": shapes, "particles": self.particles, "output": self.output, "seed": self.seed,
                "reference": self.reference, "spacing": self.spacing, "padding": self.padding,
                "optimization": opt}

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "CohortConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(data) - set(TOP_LEVEL)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("shapes", "particles"):
            if key not in data:
                raise ConfigError(f"config is missing {key!r}")
        raw = data["shapes"]
        if not isinstance(raw, list) or len(raw) < 2:
            raise ConfigError("config needs a list of at least 2 shapes")
        shapes = []
        for k, entry in enumerate(raw):
            if isinstance(entry, str):
                entry = {"mesh": entry}
            if not isinstance(entry, dict) or "mesh" not in entry:
                raise ConfigError(f"shape entry {k} needs a mesh path")
            extra = set(entry) - {"id", "mesh", "sdf"}
            if extra:
                raise ConfigError(f"shape entry {k}: unknown keys {sorted(extra)}")
            sid = str(entry.get("id", Path(entry["mesh"]).stem))
            shapes.append(ShapeEntry(sid, str(entry["mesh"]), entry.get("sdf")))
        opt = dict(data.get("optimization") or {})
        if "seed" in opt:
            raise ConfigError("set the seed at the top level, not under optimization")
        seed = int(data.get("seed", 0))
        try:
            optimization = OptimizationConfig.from_dict({**opt, "seed": seed})
        except (TypeError, ValidationError) as exc:
            raise ConfigError(f"optimization: {exc}") from exc
        spacing = data.get("spacing")
        padding = data.get("padding")
        return cls(shapes=shapes, particles=int(data["particles"]), output=str(data.get("output", "output")),
                   seed=seed, reference=data.get("reference"),
                   spacing=None if spacing is None else float(spacing),
                   padding=None if padding is None else float(padding),
                   optimization=optimization, base_dir=Path(base_dir))


def load_config(path, check_files: bool = True) -> CohortConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = CohortConfig.from_dict(data, base_dir=path.parent)
    if check_files:
        cfg.check_files()
    return cfg


def dump_config(cfg: CohortConfig, path=None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text

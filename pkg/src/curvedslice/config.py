"""Job configuration: one JSON document describing inputs, constants and knobs.

Angles are in degrees and lengths in mm throughout. Relative paths are
resolved against the directory holding the config file.

Top-level keys::

    solid      solid description (inline object or path), see implicit.build_solid
    cage       {"file": path} or {"voxel_size": mm, "dilation": int}
    boundary   {"count", "k", "platform_z", "surface_resolution", "oversample"}
    stress     {"enabled", "file" (voxel stress field) or "bc" + "voxel_size", "fraction"}
    constants  {"alpha_deg", "beta_deg", "phi_deg", "k_sf", "k_sr", "gamma"}
    weights    {"sf", "sr", "po", "hs", "hq"}
    network    {"depth", "width", "omega0"}
    trainer    see trainer.TrainConfig
    pretrain   {"epochs", "lr"}
    slicer     {"t_min", "t_max"}
    seed       integer
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .losses import LossParams, LossWeights
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class CageSpec:
    file: str | None = None
    voxel_size: float = 2.5
    dilation: int = 1


@dataclass
class BoundarySpec:
    count: int = 2000
    k: int = 10
    platform_z: float | None = None
    surface_resolution: int = 64
    oversample: int = 4


@dataclass
class StressSpec:
    enabled: bool = False
    file: str | None = None
    bc: dict | str | None = None
    voxel_size: float = 1.0
    fraction: float = 0.1


@dataclass
class NetworkSpec:
    depth: int = 3
    width: int = 32
    omega0: float = 5.0


@dataclass
class PretrainSpec:
    epochs: int = 200
    lr: float = 1e-3


@dataclass
class SlicerSpec:
    t_min: float = 0.4
    t_max: float = 1.0


@dataclass
class JobConfig:
    solid: dict
    base_dir: Path
    cage: CageSpec = field(default_factory=CageSpec)
    boundary: BoundarySpec = field(default_factory=BoundarySpec)
    stress: StressSpec = field(default_factory=StressSpec)
    params: LossParams = field(default_factory=LossParams)
    gamma: float = 1e-2
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    slicer: SlicerSpec = field(default_factory=SlicerSpec)
    seed: int = 0

    def path(self, p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        """Canonical form (paths as given) used for stage hashes."""
        c = self.params
        return {
            "solid": self.solid,
            "cage": asdict(self.cage),
            "boundary": asdict(self.boundary),
            "stress": asdict(self.stress),
            "constants": {"alpha_deg": c.alpha_deg, "beta_deg": c.beta_deg, "phi_deg": c.phi_deg,
                          "k_sf": c.k_sf, "k_sr": c.k_sr, "gamma": self.gamma},
            "weights": asdict(self.weights),
            "network": asdict(self.network),
            "trainer": asdict(self.trainer),
            "pretrain": asdict(self.pretrain),
            "slicer": asdict(self.slicer),
            "seed": self.seed,
        }


def _section(cls, doc, name):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"'{name}' must be an object")
    known = {f.name for f in fields(cls)}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown keys in '{name}': {sorted(extra)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad '{name}' section: {exc}") from exc


_TOP = {"solid", "cage", "boundary", "stress", "constants", "weights", "network", "trainer",
        "pretrain", "slicer", "seed"}


def parse_config(doc: dict, base_dir=".") -> JobConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    extra = set(doc) - _TOP
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    if "solid" not in doc:
        raise ConfigError("config needs a 'solid'")
    base = Path(base_dir)
    solid = doc["solid"]
    if isinstance(solid, str):
        sp = Path(solid) if Path(solid).is_absolute() else base / solid
        try:
            solid = json.loads(sp.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read solid description {sp}: {exc}") from exc
        # primitives inside a separate solid file are relative to that file
        solid = dict(solid, _base=str(sp.parent.resolve()))
    const = dict(doc.get("constants") or {})
    gamma = float(const.pop("gamma", 1e-2))
    if not gamma > 0:
        raise ConfigError("gamma must be positive")
    cfg = JobConfig(
        solid=solid,
        base_dir=base,
        cage=_section(CageSpec, doc.get("cage"), "cage"),
        boundary=_section(BoundarySpec, doc.get("boundary"), "boundary"),
        stress=_section(StressSpec, doc.get("stress"), "stress"),
        params=_section(LossParams, const, "constants"),
        gamma=gamma,
        weights=_section(LossWeights, doc.get("weights"), "weights"),
        network=_section(NetworkSpec, doc.get("network"), "network"),
        trainer=_section(TrainConfig, doc.get("trainer"), "trainer"),
        pretrain=_section(PretrainSpec, doc.get("pretrain"), "pretrain"),
        slicer=_section(SlicerSpec, doc.get("slicer"), "slicer"),
        seed=int(doc.get("seed", 0)),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: JobConfig) -> None:
    p = cfg.params
    if not 0 < p.alpha_deg < 90 or not 0 < p.beta_deg < 90:
        raise ConfigError("alpha_deg and beta_deg must lie in (0, 90)")
    if not 0 < p.phi_deg < 180:
        raise ConfigError("phi_deg must lie in (0, 180)")
    if cfg.cage.file is None and not cfg.cage.voxel_size > 0:
        raise ConfigError("cage.voxel_size must be positive")
    if cfg.boundary.count <= cfg.boundary.k:
        raise ConfigError("boundary.count must exceed boundary.k")
    if cfg.network.depth < 1 or cfg.network.width < 4 or not cfg.network.omega0 > 0:
        raise ConfigError("bad network architecture")
    if not 0 < cfg.slicer.t_min < cfg.slicer.t_max:
        raise ConfigError("slicer needs 0 < t_min < t_max")
    s = cfg.stress
    if s.enabled and s.file is None and s.bc is None:
        raise ConfigError("stress.enabled needs a stress 'file' or boundary conditions 'bc'")
    if s.enabled and not 0 < s.fraction <= 1:
        raise ConfigError("stress.fraction must be in (0, 1]")
    if any(w < 0 for w in asdict(cfg.weights).values()):
        raise ConfigError("loss weights must be non-negative")


def load_config(path) -> JobConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(doc, path.parent)


def digest(*parts) -> str:
    """sha256 over canonical JSON of dicts and raw bytes of files/bytes."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, (bytes, bytearray)):
            h.update(p)
        elif isinstance(p, Path):
            h.update(p.read_bytes())
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\0")
    return h.hexdigest()

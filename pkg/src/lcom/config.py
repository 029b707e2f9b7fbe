"""Run configuration: one YAML (or JSON) file with a ``schema_version`` field."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .oracle import InitConfig, PotentialSpec, RelaxConfig
from .surrogate import ComsConfig
from .vae import NoiseSchedule, VaeConfig

SCHEMA_VERSION = 1

#: Four species with frustrated cross interactions: weak, wide A-B and C-D
#: pairs and a strong, short A-C pair give small cells many competing minima.
DEFAULT_POTENTIAL = {
    "species": {"A": [1.0, 0.88], "B": [1.08, 1.14], "C": [0.9, 1.0], "D": [1.2, 0.6]},
    "pairs": {
        "AB": [1.39, 0.15],
        "CD": [1.35, 0.2],
        "AC": [0.95, 1.2],
        "BD": [1.14, 0.25],
        "AD": [1.3, 0.3],
        "BC": [1.25, 0.2],
    },
    "cutoff": 2.8,
}

DEFAULT_COMPOSITIONS = ["A2B2", "AB2", "AB3", "C2D2", "A2D2", "BC2", "CD3", "ABC", "ABCD", "B2D2"]

DEFAULT_SEEDS = [17, 43, 101]


@dataclass
class DatasetConfig:
    per_comp: int = 150
    retry_factor: int = 4


@dataclass
class OptimizerConfig:
    steps: int = 50
    step_size: float = 0.2


#: named step counts for the two dataset analogs; ``optimizer: <name>`` in a config file
OPTIMIZER_PRESETS = {
    "default": {"steps": 50},
    "oqmd-analog": {"steps": 10},
    "matbench-analog": {"steps": 40},
}


def optimizer_preset(name: str) -> OptimizerConfig:
    if name not in OPTIMIZER_PRESETS:
        raise ValueError(f"unknown optimizer preset {name!r}; choose from {sorted(OPTIMIZER_PRESETS)}")
    return OptimizerConfig(**OPTIMIZER_PRESETS[name])


@dataclass
class RunConfig:
    compositions: list = field(default_factory=lambda: list(DEFAULT_COMPOSITIONS))
    potential: dict = field(default_factory=lambda: dict(DEFAULT_POTENTIAL))
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    init: InitConfig = field(default_factory=InitConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    surrogate: ComsConfig = field(default_factory=ComsConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    master_seed: int = 0
    threshold: float = 0.2
    global_budget: int = 2000
    #: relax each method's output once before scoring it
    final_relax: bool = True
    trajectory_stride: int = 5
    workers: int = 1
    output_dir: str = "lcom-out"
    #: directory for reusable global-minimum searches; None disables caching
    cache_dir: str | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        if not self.compositions:
            raise ValueError("no compositions given")
        if self.global_budget < 1:
            raise ValueError("global_budget must be >= 1")

    @property
    def spec(self) -> PotentialSpec:
        return PotentialSpec.from_dict(self.potential)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "dataset" in d:
            d["dataset"] = DatasetConfig(**d["dataset"])
        if "init" in d:
            init = dict(d["init"])
            if "relax" in init:
                init["relax"] = RelaxConfig(**init["relax"])
            d["init"] = InitConfig(**init)
        if "vae" in d:
            d["vae"] = VaeConfig.from_dict(d["vae"])
        if "surrogate" in d:
            d["surrogate"] = ComsConfig.from_dict(d["surrogate"])
        if "optimizer" in d:
            opt = d["optimizer"]
            d["optimizer"] = optimizer_preset(opt) if isinstance(opt, str) else OptimizerConfig(**opt)
        return cls(**d)


def load_config(path) -> RunConfig:
    """Read a run config; missing sections take their defaults."""
    text = Path(path).read_text(encoding="utf-8")
    return RunConfig.from_dict(yaml.safe_load(text))


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")


__all__ = ["RunConfig", "DatasetConfig", "OptimizerConfig", "OPTIMIZER_PRESETS", "optimizer_preset", "NoiseSchedule", "load_config", "dump_config", "SCHEMA_VERSION"]

"""Pipeline configuration: one JSON file with a section per stage.

Every stage default is declared here and overridable; unknown sections
or keys are rejected so typos fail loudly at load time.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .centermap import CenterMapParams
from .errors import ConfigError, StorageError
from .instancer import InstancerParams
from .losses import S1LossParams
from .model import NetConfig
from .prm import PrmParams
from .refine import RefineLossParams
from .synth import SynthConfig
from .training import TrainConfig

CONFIG_ENV_VAR = "ZSTACKSEG_CONFIG"
DEFAULT_SEED = 1234


@dataclass(frozen=True)
class PathsConfig:
    """Artifact directory names, relative to the manifest root."""

    centermaps: str = "centermaps"
    pseudo: str = "pseudo"
    models: str = "models"
    predictions: str = "predictions"


@dataclass
class PipelineConfig:
    centermap: CenterMapParams = field(default_factory=CenterMapParams)
    net: NetConfig = field(default_factory=NetConfig)
    s1_loss: S1LossParams = field(default_factory=S1LossParams)
    s1_train: TrainConfig = field(default_factory=TrainConfig)
    s2_train: TrainConfig = field(default_factory=TrainConfig)
    refine: RefineLossParams = field(default_factory=RefineLossParams)
    prm: PrmParams = field(default_factory=PrmParams)
    instancer: InstancerParams = field(default_factory=InstancerParams)
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = DEFAULT_SEED

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Propagate one seed to every stochastic stage."""
        cfg = dataclasses.replace(self)
        cfg.seed = seed
        cfg.s1_train = dataclasses.replace(cfg.s1_train, seed=seed)
        cfg.s2_train = dataclasses.replace(cfg.s2_train, seed=seed)
        cfg.synth = dataclasses.replace(cfg.synth, seed=seed)
        return cfg


_SECTIONS = {
    "centermap": CenterMapParams,
    "net": NetConfig,
    "s1_loss": S1LossParams,
    "s1_train": TrainConfig,
    "s2_train": TrainConfig,
    "refine": RefineLossParams,
    "prm": PrmParams,
    "instancer": InstancerParams,
    "synth": SynthConfig,
    "paths": PathsConfig,
}

# keys whose JSON arrays become tuples to match the dataclasses
_TUPLE_KEYS = {"anisotropy", "dims", "spacing", "cell_count", "radius_range"}


def _build_section(name: str, cls, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be an object of key/value pairs")
    known = {f.name for f in dataclasses.fields(cls)}
    if name == "net":
        known -= {"in_channels", "out_channels"}  # fixed by the pipeline stages
    for key in values:
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
    converted = {
        k: tuple(v) if k in _TUPLE_KEYS and isinstance(v, list) else v
        for k, v in values.items()
    }
    try:
        return cls(**converted)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{name}] {e}") from e


def load_config(path=None) -> PipelineConfig:
    """Load a config file (or all defaults when path is None). The
    ZSTACKSEG_CONFIG environment variable supplies the path when no
    explicit one is given."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise StorageError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    kwargs = {}
    explicit_seeds = set()
    for key, values in doc.items():
        if key == "seed":
            if not isinstance(values, int):
                raise ConfigError("[seed] must be an integer")
            kwargs["seed"] = values
        elif key in _SECTIONS:
            if isinstance(values, dict) and "seed" in values:
                explicit_seeds.add(key)
            kwargs[key] = _build_section(key, _SECTIONS[key], values)
        else:
            raise ConfigError(f"unknown config section {key!r}")
    cfg = PipelineConfig(**kwargs)
    if "seed" in kwargs:
        # the top-level seed reaches every stochastic stage that did not
        # pin its own
        for section in ("s1_train", "s2_train", "synth"):
            if section not in explicit_seeds:
                setattr(cfg, section, dataclasses.replace(getattr(cfg, section), seed=cfg.seed))
    return cfg


def dump_default_config() -> str:
    """The full default config as JSON, for `zstackseg config --show`."""
    doc = {}
    for name, cls in _SECTIONS.items():
        section = {}
        for f in dataclasses.fields(cls):
            if name == "net" and f.name in ("in_channels", "out_channels"):
                continue
            v = getattr(cls(), f.name)
            section[f.name] = list(v) if isinstance(v, tuple) else v
        doc[name] = section
    doc["seed"] = DEFAULT_SEED
    return json.dumps(doc, indent=1, sort_keys=True)

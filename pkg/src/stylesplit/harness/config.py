"""Run configuration: YAML in, validated dataclasses out.

A run config is a YAML document with four sections — top-level run fields,
`trainer:`, `weights:`, `aug:`, and `probe:`.  Every field maps onto a
dataclass field and unknown keys are rejected by name, so typos fail loudly
instead of silently training with defaults.  STYLESPLIT_SEED in the
environment overrides the file's seed (one knob for seed sweeps without
editing configs).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import yaml

from ..fusion_probe import AGGREGATE_MODES
from ..objectives import LossWeights
from ..tensorops import OpError
from ..training import AugmentConfig, TrainerConfig

SEED_ENV_VAR = "STYLESPLIT_SEED"


@dataclass
class ProbeConfig:
    fraction: float = 0.10
    epochs: int = 300
    lr: float = 0.05
    aggregate: str = "mean"
    content_embedding: str = "pooled"
    d_f: int = 128
    eval_samples: int = 2000

    def __post_init__(self) -> None:
        if not 0 < self.fraction < 1:
            raise OpError(f"probe.fraction: must be in (0,1), got {self.fraction}")
        if self.epochs < 0:
            raise OpError(f"probe.epochs: must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise OpError(f"probe.lr: must be positive, got {self.lr}")
        if self.aggregate not in AGGREGATE_MODES:
            raise OpError(f"probe.aggregate: unknown mode '{self.aggregate}'")
        if self.content_embedding not in ("pooled", "projected"):
            raise OpError(
                "probe.content_embedding: must be 'pooled' or 'projected', "
                f"got '{self.content_embedding}'"
            )
        if self.eval_samples < 1:
            raise OpError(f"probe.eval_samples: must be >= 1, got {self.eval_samples}")


@dataclass
class RunConfig:
    seed: int = 0
    n_samples: int = 512
    steps: int = 150
    resolution: int = 64
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self) -> None:
        if self.n_samples < self.trainer.k_domains:
            raise OpError(
                f"n_samples: {self.n_samples} cannot fill k_domains={self.trainer.k_domains}"
            )
        if self.steps < 0:
            raise OpError(f"steps: must be >= 0, got {self.steps}")
        if self.trainer.resolution != self.resolution:
            raise OpError(
                f"resolution: run says {self.resolution} but trainer says "
                f"{self.trainer.resolution}; the encoders must match the dataset"
            )


def _build(cls, section: str, data: dict, **extra):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise OpError(f"config: unknown field '{key}' in section '{section}'")
    return cls(**data, **extra)


def trainer_from_dict(raw: dict) -> TrainerConfig:
    raw = dict(raw)
    weights = _build(LossWeights, "weights", raw.pop("weights", {}))
    aug = _build(AugmentConfig, "aug", raw.pop("aug", {}))
    return _build(TrainerConfig, "trainer", raw, weights=weights, aug=aug)


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    trainer_raw = raw.pop("trainer", {})
    trainer_raw = dict(trainer_raw)
    # weights/aug may sit at top level or inside trainer; accept both spellings
    for section in ("weights", "aug"):
        if section in raw:
            trainer_raw.setdefault(section, raw.pop(section))
    probe = _build(ProbeConfig, "probe", raw.pop("probe", {}))
    seed = raw.get("seed", 0)
    trainer_raw.setdefault("seed", seed)
    trainer_raw.setdefault("resolution", raw.get("resolution", RunConfig.resolution))
    trainer = trainer_from_dict(trainer_raw)
    return _build(RunConfig, "run", raw, trainer=trainer, probe=probe)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str) -> RunConfig:
    """Parse, validate, and apply the environment seed override."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise OpError(f"config: expected a mapping at top level of {path}")
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            raw["seed"] = int(env_seed)
        except ValueError:
            raise OpError(f"config: {SEED_ENV_VAR} must be an integer, got '{env_seed}'")
        raw.setdefault("trainer", {})
        raw["trainer"] = dict(raw["trainer"])
        raw["trainer"]["seed"] = raw["seed"]
    return config_from_dict(raw)


def config_from_manifest(manifest_run: dict) -> RunConfig:
    """Rebuild a RunConfig from the dict echoed into a checkpoint manifest."""
    raw = dict(manifest_run)
    trainer_raw = dict(raw.pop("trainer"))
    probe_raw = dict(raw.pop("probe"))
    # asdict() expands nested dataclasses; tuples arrive as lists from JSON
    if "patch_layers" in trainer_raw:
        trainer_raw["patch_layers"] = tuple(trainer_raw["patch_layers"])
    trainer = trainer_from_dict(trainer_raw)
    probe = _build(ProbeConfig, "probe", probe_raw)
    return _build(RunConfig, "run", raw, trainer=trainer, probe=probe)

"""YAML run configuration: strict schema, defaults, and round-tripping into manifests."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .acoustics import ChannelParams, ConstantNoise, SpectralNoise
from .env import MALFUNCTION_MODES, ScenarioConfig
from .marl import TrainerConfig
from .metrics import UtilityWeights
from .world import MobilityConfig, Region, load_deployment

CONFIG_FORMAT = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class CurriculumConfig:
    enabled: bool = False
    u_th: float | None = None
    gamma_lf: float = 0.01
    epsilon_max: float = 0.6


@dataclass(frozen=True)
class SweepConfig:
    u_min: float | None = None      # None: calibrate against the random policy
    u_max: float | None = None      # None: calibrate with an epsilon-0 training
    steps: int = 5
    factors: tuple[float, ...] = (0.001, 0.01, 0.1)
    n_eva: int = 20


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 100
    epsilon: float | None = None    # None: the scenario's rate
    malfunction_mode: str = "random"

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.malfunction_mode not in MALFUNCTION_MODES:
            raise ValueError(f"malfunction_mode must be one of {MALFUNCTION_MODES}")
        if self.epsilon is not None and not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    deployment_file: str | None = None

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed,
                                   trainer=dataclasses.replace(self.trainer, seed=seed))


# nested dataclass fields and how to build them
_NESTED = {
    (ScenarioConfig, "weights"): UtilityWeights,
    (ScenarioConfig, "region"): Region,
    (ScenarioConfig, "channel"): ChannelParams,
    (ScenarioConfig, "mobility"): MobilityConfig,
    (RunConfig, "scenario"): ScenarioConfig,
    (RunConfig, "trainer"): TrainerConfig,
    (RunConfig, "curriculum"): CurriculumConfig,
    (RunConfig, "sweep"): SweepConfig,
    (RunConfig, "eval"): EvalConfig,
}
_SKIP = {(ScenarioConfig, "deployment"), (TrainerConfig, "seed")}
_TUPLES = {(ScenarioConfig, "power_levels_w"), (SweepConfig, "factors")}


def _noise_from(data, key: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{key}: expected a mapping")
    data = dict(data)
    kind = data.pop("kind", "spectral")
    cls = {"spectral": SpectralNoise, "constant": ConstantNoise}.get(kind)
    if cls is None:
        raise ConfigError(f"{key}.kind: unknown noise model {kind!r}")
    return _build(cls, data, key)


def _build(cls, data, prefix: str):
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    names = {f.name for f in fields(cls) if f.init and (cls, f.name) not in _SKIP}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in names:
            raise ConfigError(f"unknown key '{path}'")
        if (cls, key) in _NESTED:
            value = _build(_NESTED[(cls, key)], value, path)
        elif cls is ChannelParams and key == "ambient_noise":
            value = _noise_from(value, path)
        elif (cls, key) in _TUPLES:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}: expected a list")
            value = tuple(float(v) for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None


def config_from_dict(data: Mapping, base_dir: Path | None = None) -> RunConfig:
    """Validate and build a run config. A manifest's ``config`` entry is accepted as well."""
    if not isinstance(data, Mapping):
        raise ConfigError("config: expected a mapping at top level")
    if "config" in data and "format" not in data:
        data = data["config"]
    if "format" not in data:
        raise ConfigError("missing required key 'format'")
    if data["format"] != CONFIG_FORMAT:
        raise ConfigError(f"format: unsupported version {data['format']!r} (expected {CONFIG_FORMAT})")
    body = {k: v for k, v in data.items() if k != "format"}
    cfg = _build(RunConfig, body, "")
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed: expected an integer")
    cfg = cfg.with_seed(cfg.seed)
    if cfg.deployment_file:
        path = Path(cfg.deployment_file)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            dep = load_deployment(path)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"deployment_file: cannot load {path}: {exc}") from None
        cfg = dataclasses.replace(cfg, scenario=dataclasses.replace(cfg.scenario, deployment=dep))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return config_from_dict(data, path.parent)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        out = {}
        if isinstance(obj, (SpectralNoise, ConstantNoise)):
            out["kind"] = "spectral" if isinstance(obj, SpectralNoise) else "constant"
        for f in fields(obj):
            if not f.init or (type(obj), f.name) in _SKIP:
                continue
            out[f.name] = _plain(getattr(obj, f.name))
        return out
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):   # enums
        return obj.value
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain-data form that ``config_from_dict`` maps back to an equal config."""
    return {"format": CONFIG_FORMAT, **_plain(cfg)}


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)

"""RunConfig: one YAML (or JSON) file describing a full experiment.

Sections mirror the dataclasses they populate; any key a dataclass does not
declare is rejected with the dotted path of the offender.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .domains import PRETRAIN_TRANSFORMS, StreamSpec
from .encoder import EncoderConfig, PretrainBudget
from .harness import AblationPlan
from .prompting import MODES, MethodConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    n_samples: int = 10_000
    seed: int = 0
    transforms: tuple[str, ...] = PRETRAIN_TRANSFORMS


@dataclass(frozen=True)
class HarnessConfig:
    modes: tuple[str, ...] = MODES
    ood: bool = True


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainBudget = field(default_factory=PretrainBudget)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    stream: StreamSpec = field(default_factory=StreamSpec)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    ablation: AblationPlan = field(default_factory=AblationPlan)
    backbone: str | None = None  # path of a pretrained backbone checkpoint
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def experiment_dict(self) -> dict:
        """Settings that shape results; file locations are left out."""
        d = self.to_dict()
        for key in LOCATION_KEYS:
            d.pop(key)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.experiment_dict(), sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, method=dataclasses.replace(self.method, seed=seed))


LOCATION_KEYS = ("backbone", "output_dir")

_SECTIONS = {
    "encoder": EncoderConfig,
    "pretrain": PretrainBudget,
    "corpus": CorpusConfig,
    "method": MethodConfig,
    "stream": StreamSpec,
    "harness": HarnessConfig,
    "ablation": AblationPlan,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values, path: str):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {path}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in values.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _build(cls, data.get(name), name) for name, cls in _SECTIONS.items()}
    for mode in kwargs["harness"].modes:
        if mode not in MODES:
            raise ConfigError(f"harness.modes: unknown mode {mode!r}")
    if "backbone" in data:
        kwargs["backbone"] = data["backbone"]
    if "output_dir" in data:
        kwargs["output_dir"] = str(data["output_dir"])
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML ({exc})") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))

"""Run configuration: a YAML/JSON document with ``synth``, ``backbone`` and ``train`` sections."""

import dataclasses
from pathlib import Path

import yaml

from .data import SynthConfig
from .errors import ConfigError
from .network import BackboneConfig
from .train import TrainConfig

SECTIONS = {"synth": SynthConfig, "backbone": BackboneConfig, "train": TrainConfig}


@dataclasses.dataclass
class RunConfig:
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    backbone: BackboneConfig = dataclasses.field(default_factory=BackboneConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)

    def to_dict(self):
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def replace(self, section, **changes):
        current = dataclasses.asdict(getattr(self, section))
        current.update(changes)
        return dataclasses.replace(self, **{section: SECTIONS[section](**current)})


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, "value") and not isinstance(value, (int, float, str, bool)):
        return value.value
    return value


def _coerce(section, cls, values):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(f"{section}.{key}", "unknown key")
        default = fields[key].default
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{section}.{key}", f"expected a boolean, got {value!r}")
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{section}.{key}", f"expected an integer, got {value!r}")
        if isinstance(default, float) and not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key}", f"expected a number, got {value!r}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from exc


def from_dict(doc):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "configuration must be a mapping of sections")
    sections = {}
    for name, values in doc.items():
        if name not in SECTIONS:
            raise ConfigError(name, "unknown section")
        if values is None:
            values = {}
        if not isinstance(values, dict):
            raise ConfigError(name, "section must be a mapping")
        sections[name] = _coerce(name, SECTIONS[name], values)
    return RunConfig(**sections)


def load_config(path=None, seed=None):
    """Parse a config file (or defaults when ``path`` is None); ``seed`` overrides both seeds."""
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError("--config", f"not valid YAML/JSON: {exc}") from exc
    cfg = from_dict(doc)
    if seed is not None:
        cfg = cfg.replace("synth", seed=seed).replace("train", seed=seed)
    return cfg

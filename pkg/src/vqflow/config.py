"""Run configuration: an INI file with sections, overridable from the command line."""
from __future__ import annotations

import ast
import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SynthSpec
from .exceptions import ConfigError
from .model import ABLATIONS, ModelConfig, desk_config
from .training import TrainConfig

SECTIONS = ("run", "synth", "model", "train", "eval")
PRESETS = ("desk", "full")


def _parse(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _format(value) -> str:
    return value if isinstance(value, str) else repr(value)


@dataclass
class EvalOptions:
    density: str = "dedicated"
    score_mode: str = "max"
    dump_maps: bool = False
    batch_size: int = 32


@dataclass
class RunConfig:
    """Merged view of every tunable, one INI section per group."""

    seed: int = 0
    preset: str = "desk"
    synth: SynthSpec = field(default_factory=SynthSpec)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, lr=1e-3))
    eval: EvalOptions = field(default_factory=EvalOptions)

    def model_config(self, in_channels=None, spatial=None) -> ModelConfig:
        """Architecture for the given geometry (defaults to the synth geometry)."""
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        kw = dict(self.model)
        ablation = kw.pop("ablation", None)
        if ablation is not None:
            if ablation not in ABLATIONS:
                raise ConfigError(f"unknown ablation id {ablation}; known: {sorted(ABLATIONS)}")
            kw.update(zip(("cadm", "cpc", "cspc", "pe"), ABLATIONS[ablation]))
        kw["in_channels"] = tuple(in_channels or self.synth.channels)
        kw["spatial"] = tuple(spatial or self.synth.spatial)
        kw.setdefault("seed", self.seed)
        names = {f.name for f in fields(ModelConfig)}
        unknown = set(kw) - names
        if unknown:
            raise ConfigError(f"unknown [model] keys: {sorted(unknown)}")
        cfg = desk_config(**kw) if self.preset == "desk" else ModelConfig(**kw)
        cfg.validate()
        return cfg

    def set(self, key: str, value) -> None:
        """Apply one ``section.key`` override; ``value`` may be a string literal."""
        if "." not in key:
            raise ConfigError(f"override {key!r} must look like section.key")
        section, name = key.split(".", 1)
        if isinstance(value, str):
            value = _parse(value)
        if section == "run":
            if name not in ("seed", "preset"):
                raise ConfigError(f"unknown [run] key {name!r}")
            setattr(self, name, value)
        elif section == "model":
            self.model[name] = value
        elif section in ("synth", "train", "eval"):
            target = getattr(self, section)
            if name not in {f.name for f in fields(target)}:
                raise ConfigError(f"unknown [{section}] key {name!r}")
            setattr(self, section, replace(target, **{name: value}))
        else:
            raise ConfigError(f"unknown section {section!r}; known: {SECTIONS}")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": _format(self.seed), "preset": self.preset}
        cp["synth"] = {f.name: _format(getattr(self.synth, f.name)) for f in fields(self.synth)}
        cp["model"] = {k: _format(v) for k, v in sorted(self.model.items())}
        cp["train"] = {f.name: _format(getattr(self.train, f.name)) for f in fields(self.train)}
        cp["eval"] = {f.name: _format(getattr(self.eval, f.name)) for f in fields(self.eval)}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_ini())
        return path

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        cfg = cls()
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for k, v in cp[section].items():
                cfg.set(f"{section}.{k}", v)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_ini(Path(path).read_text())

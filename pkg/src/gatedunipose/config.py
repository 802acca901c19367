"""Run configuration files: TOML with ``[model]``, ``[data]``, ``[train]``, ``[verify]`` sections.

Unknown keys are rejected. ``[model].preset`` selects a base architecture that
the remaining ``[model]`` keys override. ``seed`` and ``precision`` live at the
top level and feed every section.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .data import SyntheticSpec
from .exceptions import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class VerifyConfig:
    cases: int = 20
    coords_per_case: int = 6
    reparam_inputs: int = 10
    codec_positions: int = 600


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig.preset("toy"))
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    seed: int = 0
    precision: str = "f32"
    preset: str = "toy"

    def with_seed(self, seed: int) -> "RunConfig":
        self.seed = int(seed)
        self.model.seed = self.seed
        self.data.seed = self.seed
        return self

    def validate(self) -> "RunConfig":
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision", f"expected 'f32' or 'f64', got {self.precision!r}")
        self.model.validate()
        self.data.validate()
        if self.data.joints != self.model.joints:
            raise ConfigError("data.joints", f"{self.data.joints} != model.joints {self.model.joints}")
        if tuple(self.data.image_size) != tuple(self.model.input_size):
            raise ConfigError("data.image_size", f"{self.data.image_size} != model.input_size {self.model.input_size}")
        if self.train.steps < 0 or self.train.batch_size < 1 or self.train.lr < 0:
            raise ConfigError("train", "steps >= 0, batch_size >= 1 and lr >= 0 are required")
        return self


_SECTIONS = {"model": ModelConfig, "data": SyntheticSpec, "train": TrainConfig, "verify": VerifyConfig}
_TOP_LEVEL = {"seed", "precision"}


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def parse_config(doc: dict) -> RunConfig:
    for key in doc:
        if key not in _SECTIONS and key not in _TOP_LEVEL:
            raise ConfigError(key, "unknown top-level key")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed", "must be an integer")

    model_doc = dict(doc.get("model", {}))
    preset = model_doc.pop("preset", "toy")
    for key in model_doc:
        if key not in _fields(ModelConfig) or key == "seed":
            raise ConfigError(f"model.{key}", "unknown key")
    model = ModelConfig.preset(preset, **model_doc, seed=seed)

    sections = {}
    for name in ("data", "train", "verify"):
        cls = _SECTIONS[name]
        section = dict(doc.get(name, {}))
        for key in section:
            if key not in _fields(cls) or key == "seed":
                raise ConfigError(f"{name}.{key}", "unknown key")
        sections[name] = section
    data_doc = {"joints": model.joints, "image_size": model.input_size, **sections["data"], "seed": seed}
    try:
        return RunConfig(
            model=model,
            data=SyntheticSpec(**data_doc),
            train=TrainConfig(**sections["train"]),
            verify=VerifyConfig(**sections["verify"]),
            seed=seed,
            precision=doc.get("precision", "f32"),
            preset=preset,
        )
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        doc = tomli.loads(Path(path).read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"invalid TOML: {exc}") from exc
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc}") from exc
    return parse_config(doc)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialise {type(v).__name__} to TOML")


def dump_config(config: RunConfig) -> str:
    """TOML text that :func:`parse_config` maps back to an equal configuration."""
    lines = [f"seed = {config.seed}", f"precision = {_toml_value(config.precision)}", ""]
    model = config.model.to_dict()
    model.pop("seed")
    sections = {
        "model": {"preset": config.preset, **{k: v for k, v in model.items() if v is not None}},
        "data": {k: v for k, v in dataclasses.asdict(config.data).items() if k != "seed"},
        "train": dataclasses.asdict(config.train),
        "verify": dataclasses.asdict(config.verify),
    }
    for name, values in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)

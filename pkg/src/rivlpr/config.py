"""Flat text pipeline configuration.

One INI-style file carries every module's settings under section headers
([riv], [augment], [mining], [loss], [train], [eval]).  Unknown sections or
keys are rejected outright, and every value is validated by the owning
config dataclass at parse time, so a config that loads is a config that
runs.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentSpec
from .evaluate import EvalProtocol
from .loss import LossConfig
from .mining import MiningConfig
from .riv import RivConfig
from .trainer import TrainConfig


@dataclass
class PipelineConfig:
    """All module configs in one object, as read from a pipeline file."""

    riv: RivConfig = field(default_factory=RivConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    mining: MiningConfig = field(default_factory=MiningConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)


_SECTIONS = {
    "riv": RivConfig,
    "augment": AugmentSpec,
    "mining": MiningConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalProtocol,
}


def _convert(raw: str, annotation, key: str):
    text = raw.strip()
    if annotation is bool or annotation == "bool":
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if annotation is int or annotation == "int":
        return int(text)
    if annotation is float or annotation == "float":
        # degrees are friendlier than radians in config files
        if text.endswith("deg"):
            return float(np.deg2rad(float(text[:-3])))
        return float(text)
    return text


def parse_pipeline_config(path) -> PipelineConfig:
    """Load and validate a pipeline config file; unknown keys are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    out = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"{path}: unknown config section [{section}]")
        cls = _SECTIONS[section]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in parser.items(section):
            if key not in fields:
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            ann = fields[key].type
            base = {"int": int, "float": float, "bool": bool, "str": str}.get(str(ann).replace("builtins.", ""), ann)
            kwargs[key] = _convert(raw, base, f"[{section}] {key}")
        out[section] = cls(**kwargs)
    return PipelineConfig(**out)


def write_pipeline_config(path, cfg: PipelineConfig) -> None:
    """Emit a config file that parses back to `cfg` (floats as radians)."""
    lines = []
    for section, cls in _SECTIONS.items():
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(cls):
            val = getattr(obj, f.name)
            if isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(float(val))
            lines.append(f"{f.name} = {val}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))

"""Run configuration: one JSON file with a section per component.

Every section is optional; a missing key keeps the component default and an
unknown key (at any level) is rejected before any work starts.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import ToyConfig
from .errors import InvalidInputError
from .metrics import DEFAULT_NSA_TAU
from .model import ModelConfig
from .stage1 import Stage1Schedule
from .stage2 import Stage2Config


@dataclass
class EvalOptions:
    nsa_tau: float = DEFAULT_NSA_TAU
    baseline_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.nsa_tau <= 1.0:
            raise InvalidInputError("nsa_tau must lie in (0, 1]")


SECTIONS = {"model": ModelConfig, "stage1": Stage1Schedule, "stage2": Stage2Config,
            "toy": ToyConfig, "eval": EvalOptions}


def _build(cls, values, section):
    if not isinstance(values, dict):
        raise InvalidInputError(f"config section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise InvalidInputError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise InvalidInputError(f"section {section!r}: {exc}") from exc


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Schedule = field(default_factory=Stage1Schedule)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    toy: ToyConfig = field(default_factory=ToyConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise InvalidInputError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise InvalidInputError(f"unknown config sections: {sorted(unknown)}")
        return cls(**{name: _build(SECTIONS[name], d[name], name) for name in d})

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the same seed in every seeded section."""
        return RunConfig(model=dataclasses.replace(self.model, seed=seed),
                         stage1=self.stage1,
                         stage2=dataclasses.replace(self.stage2, seed=seed),
                         toy=dataclasses.replace(self.toy, seed=seed),
                         eval=self.eval)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

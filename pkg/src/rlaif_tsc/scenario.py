"""Scenario definitions: simulator config, prompt texts, oracle weights, run schedule."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import yaml

from .annotate import OracleTeacherSpec
from .sim import ConfigError, SimConfig

SCENARIO_NAMES = ("throughput_emission", "lane_priorities")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    sim: SimConfig
    objectives: tuple[str, ...]
    user_specification: str
    oracle: OracleTeacherSpec
    focus: str = "emission"  # "emission" or "direction": which totals the text descriptions carry
    run_length: int = 100_000
    feedback_period: int = 5000
    annotation_batch: int = 1024
    oversample: int = 5
    bootstrap_length: int = 5000
    segment_length: int = 1
    seed: int = 0
    variants: dict = field(default_factory=dict, compare=False, hash=False)

    def validate(self) -> "ScenarioSpec":
        self.sim.validate()
        if self.focus not in ("emission", "direction"):
            raise ConfigError(f"unknown scenario focus {self.focus!r}")
        if not self.objectives or not self.user_specification:
            raise ConfigError("objectives and user specification must be non-empty")
        for name in ("run_length", "feedback_period", "annotation_batch", "oversample", "segment_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.bootstrap_length < 0:
            raise ConfigError("bootstrap_length must be >= 0")
        if self.feedback_period > self.run_length:
            raise ConfigError("feedback_period must not exceed run_length")
        if self.annotation_batch > self.oversample * self.annotation_batch:
            raise ConfigError("annotation batch exceeds the candidate pool")
        return self

    def with_updates(self, **kw) -> "ScenarioSpec":
        return replace(self, **kw).validate()

    def variant(self, key: str) -> "ScenarioSpec":
        """The scenario with one named user specification swapped in."""
        if key not in self.variants:
            raise ConfigError(f"scenario {self.name!r} has no variant {key!r}")
        v = self.variants[key]
        oracle = replace(self.oracle, weights=dict(v.get("oracle_weights", self.oracle.weights)))
        return replace(
            self,
            objectives=tuple(v.get("objectives", self.objectives)),
            user_specification=v.get("user_specification", self.user_specification),
            oracle=oracle,
        ).validate()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "focus": self.focus,
            "sim": self.sim.to_dict(),
            "objectives": list(self.objectives),
            "user_specification": self.user_specification,
            "oracle": self.oracle.to_dict(),
            "run": {k: getattr(self, k) for k in _RUN_KEYS},
            "seed": self.seed,
            "variants": self.variants,
        }


_RUN_KEYS = ("run_length", "feedback_period", "annotation_batch", "oversample",
             "bootstrap_length", "segment_length")


def scenario_from_dict(d: dict) -> ScenarioSpec:
    try:
        run = d.get("run", {})
        unknown = set(run) - set(_RUN_KEYS)
        if unknown:
            raise ConfigError(f"unknown run keys: {sorted(unknown)}")
        return ScenarioSpec(
            name=d["name"],
            focus=d.get("focus", "emission"),
            sim=SimConfig.from_dict(d.get("sim", {})),
            objectives=tuple(d["objectives"]),
            user_specification=d["user_specification"],
            oracle=OracleTeacherSpec.from_dict(d["oracle"]),
            seed=int(d.get("seed", 0)),
            variants=d.get("variants", {}) or {},
            **{k: int(v) for k, v in run.items()},
        ).validate()
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed scenario: {exc}") from exc


def load_scenario(name_or_path: str | Path) -> ScenarioSpec:
    """Load a shipped scenario by name, or any scenario YAML file by path."""
    if str(name_or_path) in SCENARIO_NAMES:
        text = resources.files("rlaif_tsc.scenarios").joinpath(f"{name_or_path}.yaml").read_text()
    else:
        path = Path(name_or_path)
        if not path.is_file():
            raise ConfigError(f"unknown scenario {str(name_or_path)!r}; choose one of {SCENARIO_NAMES} or a YAML path")
        text = path.read_text()
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError("scenario file must contain a mapping")
    return scenario_from_dict(data)

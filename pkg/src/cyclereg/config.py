"""Run configuration: one YAML-serializable object covering the whole pipeline.

Every CLI run materializes all defaults into a resolved snapshot written next
to its outputs, so a run is reproducible from its output directory alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .convex import CoupledConvexConfig
from .errors import UsageError
from .refine import RefinementConfig
from .selftrain import AugmentConfig, SelfTrainingConfig, TrainingSchedule


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    convex: CoupledConvexConfig = field(default_factory=CoupledConvexConfig)
    refine: RefinementConfig = field(default_factory=RefinementConfig)
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    refine_labels: bool = True

    def selftraining(self) -> SelfTrainingConfig:
        return SelfTrainingConfig(convex=self.convex, refine=self.refine,
                                  augment=self.augment,
                                  refine_labels=self.refine_labels, seed=self.seed)


_SECTIONS = {
    "convex": CoupledConvexConfig,
    "refine": RefinementConfig,
    "schedule": TrainingSchedule,
    "augment": AugmentConfig,
}


def config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["convex"]["coupling_schedule"] = list(out["convex"]["coupling_schedule"])
    return out


def _build_section(cls, values: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown {section} config keys: {sorted(unknown)}")
    if "coupling_schedule" in values and values["coupling_schedule"] is not None:
        values = dict(values, coupling_schedule=tuple(values["coupling_schedule"]))
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {section} config: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    kwargs = {}
    for section, cls in _SECTIONS.items():
        if section in data:
            kwargs[section] = _build_section(cls, data.pop(section) or {}, section)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    kwargs.update(data)
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` overrides; values parse as YAML scalars."""
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse override value {raw!r}: {exc}") from exc
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"override path {dotted!r} crosses a scalar")
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=None) -> RunConfig:
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{path}: config must be a mapping")
    data = apply_overrides(data, overrides)
    return config_from_dict(data)


def save_config(path, cfg: RunConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))

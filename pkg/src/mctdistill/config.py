"""Run configuration: one JSON file holding every stage's settings.

Unknown keys are rejected at every level so a typo never silently falls
back to a default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError


@dataclass
class DatasetSection:
    name: str = "blobs"
    num_classes: int = 4
    feature_dim: int = 16
    train_per_class: int = 500
    val_per_class: int = 250
    spread: float = 0.6
    # IDX files; used when name == "idx"
    images: Optional[str] = None
    labels: Optional[str] = None
    train_fraction: float = 0.8
    standardize: bool = False


@dataclass
class ModelSection:
    hidden_widths: list = field(default_factory=lambda: [64, 64])


@dataclass
class ExpertSection:
    epochs: int = 20
    batch_size: int = 50
    lr: float = 0.05
    num_experts: int = 5
    record_step_norms: bool = False


@dataclass
class ConvexifySection:
    anchors: str = "0,K"


@dataclass
class DistillSection:
    mode: str = "mct"
    ipc: int = 1
    M: int = 2
    N: int = 10
    max_start_epoch: float = 10.0
    outer_lr_features: float = 1.0
    outer_lr_alpha: float = 1e-3
    outer_iters: int = 1000
    eval_every: int = 50
    continuous_sampling: bool = True
    stability_tail: int = 10


@dataclass
class EvalSection:
    repeats: int = 5
    train_iters: int = 1000
    epsilon: float = 2.0


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "expert": ExpertSection,
    "convexify": ConvexifySection,
    "distill": DistillSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    expert: ExpertSection = field(default_factory=ExpertSection)
    convexify: ConvexifySection = field(default_factory=ConvexifySection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - {"seed", *SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        for name, section in SECTIONS.items():
            if name in data:
                kwargs[name] = _section_from_dict(name, section, data[name])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def with_overrides(self, section: str, **values) -> "RunConfig":
        """A copy with the non-None ``values`` replaced in ``section``."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        if section == "seed":
            return replace(self, seed=values["seed"])
        return replace(self, **{section: replace(getattr(self, section), **values)})


def _section_from_dict(name: str, section, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(section)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(sorted(unknown))}")
    return section(**data)

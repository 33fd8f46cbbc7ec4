"""Run configuration: one nested, schema-versioned document per run."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig

SCHEMA_VERSION = 1
MODES = ("hypnos", "dreambooth_baseline", "ablation_no_perceptual", "ablation_no_ld",
         "ablation_ungated_perceptual")


class SchemaError(ValueError):
    pass


@dataclass
class DataConfig:
    n_instance: int = 4
    n_class: int = 16
    instance_token: str = "sks"
    class_token: str = "toy"
    background_placeholder: str = "krn"
    augment_proportion: float = 0.66
    resize_fraction: float = 0.15
    scale_range: list[float] = field(default_factory=lambda: [0.6, 0.9])
    palette: list[str] = field(default_factory=lambda: ["white", "black", "gray", "red", "green", "blue"])


@dataclass
class LossConfig:
    lambda_r: float = 1.0
    lambda_pp: float = 1.0
    lambda_p: float = 0.003
    lambda_ld: float = 0.5
    sigma: Any = 1.382  # float, or "auto" to calibrate on [0, 1]
    s_p: int = 500
    block_weights: dict[str, float] = field(default_factory=lambda: {"2": 0.35, "3": 0.45, "4": 0.2})
    perceptual_seed: int = 0
    perceptual_pretrain_steps: int = 150


@dataclass
class DiscriminatorConfig:
    pretrain_steps: int = 600
    batch_size: int = 16
    lr: float = 1e-3
    joint_lr: float = 2e-4
    d_steps_per_g: int = 1
    generated_as_fake: bool = True
    r1_gamma: float = 1.0
    fill_value: float = 0.5


@dataclass
class TrainerConfig:
    mode: str = "hypnos"
    total_steps: int = 800
    lr: float = 1e-3


@dataclass
class EvalConfig:
    n_images: int = 50
    num_steps: int = 25
    seed_offset: int = 10_000
    fid_shrinkage: float = 0.1
    clip_t_prompt: str = "full"  # or "first_clause"


@dataclass
class RunConfig:
    seed: int = 42
    schema_version: int = SCHEMA_VERSION
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        errors: list[str] = []
        cfg = _build(cls, d, "", errors)
        if errors:
            raise SchemaError("invalid config: " + "; ".join(errors))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self) -> None:
        problems = []
        if self.schema_version != SCHEMA_VERSION:
            problems.append(f"schema_version {self.schema_version} unsupported (expected {SCHEMA_VERSION})")
        if self.trainer.mode not in MODES:
            problems.append(f"trainer.mode must be one of {MODES}")
        if self.losses.s_p > self.trainer.total_steps:
            problems.append("losses.s_p exceeds trainer.total_steps")
        if abs(sum(self.losses.block_weights.values()) - 1.0) > 1e-9:
            problems.append("losses.block_weights must sum to 1")
        if not (isinstance(self.losses.sigma, (int, float)) and self.losses.sigma > 0) and self.losses.sigma != "auto":
            problems.append("losses.sigma must be a positive number or 'auto'")
        if self.data.n_class < self.data.n_instance or self.data.n_instance < 1:
            problems.append("data.n_class must be >= data.n_instance >= 1")
        if self.data.instance_token == self.data.background_placeholder:
            problems.append("data.instance_token must differ from data.background_placeholder")
        if problems:
            raise SchemaError("invalid config: " + "; ".join(problems))

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise SchemaError(f"override must look like section.key=value: {item!r}")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise SchemaError(f"unknown config key: {key}")
                node = node[p]
            if parts[-1] not in node:
                raise SchemaError(f"unknown config key: {key}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


def _build(cls, d: Any, prefix: str, errors: list[str]):
    if not isinstance(d, dict):
        errors.append(f"{prefix or '<root>'} must be a mapping")
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for k in d:
        if k not in fields:
            errors.append(f"unknown key {prefix}{k}")
    kwargs = {}
    for name, f in fields.items():
        if name not in d:
            continue
        sub = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build(type(sub), d[name], f"{prefix}{name}.", errors)
        else:
            kwargs[name] = d[name]
    return cls(**kwargs)

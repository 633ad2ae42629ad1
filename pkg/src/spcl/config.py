"""Experiment configuration: nested sections, JSON files, dotted-path overrides.

Every field has a default; unknown keys are rejected so a typo in a config
file fails loudly instead of silently running the default.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import InvalidConfig
from .models import ModelConfig
from .self_paced import SelfPacedConfig
from .semi_supervised import PretrainConfig, SemiSupConfig
from .synth_data import AugmentationPolicy

OUTPUT_ROOT_ENV = "SPCL_OUTPUT_ROOT"


@dataclass(frozen=True)
class DataSection:
    num_patients: int = 10
    slices_per_volume: int = 12
    height: int = 16
    width: int = 16
    noise_level: float = 0.3
    num_partitions: int = 4
    seed: int = 7


@dataclass(frozen=True)
class ModelSection:
    arch: str = "conv"
    conv_channels: tuple[int, ...] = (6, 12)
    encoder_widths: tuple[int, ...] = (64, 32)
    head_hidden: int = 64
    embed_dim: int = 32
    decoder_width: int = 64
    skip_width: int = 16
    leaky_slope: float = 0.01


@dataclass(frozen=True)
class SelfPacedSection:
    regularizer: str = "linear"
    tau: float = 0.5
    gamma_start: float | None = None
    gamma_end: float | None = None
    p: float = 0.5
    lambdas: tuple[float, ...] = (1.0, 0.1, 0.1)


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 40
    batch_originals: int = 8
    lr: float = 1e-3
    loss_mode: str = "sp"


@dataclass(frozen=True)
class SemiSupSection:
    epochs: int = 40
    batch_size: int = 8
    unlabeled_batch_originals: int = 8
    lr: float = 2e-3
    lambda_reg: float = 0.1
    lambda_sp: float = 0.1
    ema_decay: float = 0.99
    consistency_noise: float = 0.05
    sp_on_unlabeled_only: bool = False
    encoder_lr_scale: float = 1.0
    sp_weighting: bool = True


@dataclass(frozen=True)
class AugmentSection:
    flip_prob: float = 0.5
    max_rotate_deg: float = 0.0
    crop_scale: tuple[float, float] = (1.0, 1.0)
    gamma_range: tuple[float, float] = (0.95, 1.05)
    brightness_delta: float = 0.03


@dataclass(frozen=True)
class AblationSection:
    seeds: tuple[int, ...] = (0, 1, 2)
    num_labeled: int = 2
    baseline_margin: float = 0.05
    eval_split: str = "test"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    self_paced: SelfPacedSection = field(default_factory=SelfPacedSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    semisup: SemiSupSection = field(default_factory=SemiSupSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    # -- builders for the concrete module configs --

    def data_kwargs(self) -> dict:
        d = self.data
        return dict(
            num_patients=d.num_patients,
            slices_per_volume=d.slices_per_volume,
            shape=(d.height, d.width),
            noise_level=d.noise_level,
            seed=d.seed,
            num_partitions=d.num_partitions,
        )

    def model_config(self, seed: int | None = None) -> ModelConfig:
        m = self.model
        return ModelConfig(
            image_shape=(self.data.height, self.data.width),
            num_classes=2,
            arch=m.arch,
            conv_channels=tuple(m.conv_channels),
            encoder_widths=tuple(m.encoder_widths),
            head_hidden=m.head_hidden,
            embed_dim=m.embed_dim,
            decoder_width=m.decoder_width,
            skip_width=m.skip_width,
            leaky_slope=m.leaky_slope,
            seed=self.seed if seed is None else seed,
        )

    def self_paced_config(self) -> SelfPacedConfig:
        s = self.self_paced
        return SelfPacedConfig(
            regularizer=s.regularizer,
            tau=s.tau,
            gamma_start=s.gamma_start,
            gamma_end=s.gamma_end,
            p=s.p,
            lambdas=tuple(s.lambdas),
        )

    def pretrain_config(self) -> PretrainConfig:
        p = self.pretrain
        return PretrainConfig(
            epochs=p.epochs,
            batch_originals=p.batch_originals,
            lr=p.lr,
            loss_mode=p.loss_mode,
            self_paced=self.self_paced_config(),
        )

    def semisup_config(self, **overrides) -> SemiSupConfig:
        s = self.semisup
        kwargs = dict(
            epochs=s.epochs,
            batch_size=s.batch_size,
            unlabeled_batch_originals=s.unlabeled_batch_originals,
            lr=s.lr,
            lambda_reg=s.lambda_reg,
            lambda_sp=s.lambda_sp,
            ema_decay=s.ema_decay,
            consistency_noise=s.consistency_noise,
            sp_on_unlabeled_only=s.sp_on_unlabeled_only,
            encoder_lr_scale=s.encoder_lr_scale,
            sp_weighting=s.sp_weighting,
            self_paced=self.self_paced_config(),
        )
        kwargs.update(overrides)
        return SemiSupConfig(**kwargs)

    def augment_policy(self) -> AugmentationPolicy:
        a = self.augment
        return AugmentationPolicy(
            flip_prob=a.flip_prob,
            max_rotate_deg=a.max_rotate_deg,
            crop_scale=tuple(a.crop_scale),
            gamma_range=tuple(a.gamma_range),
            brightness_delta=a.brightness_delta,
        )

    def output_root(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(root) / self.output_dir if root else Path(self.output_dir)


def _from_dict(cls, data: dict, path: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise InvalidConfig(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in _SECTIONS:
            if not isinstance(value, dict):
                raise InvalidConfig(f"section {path}{name} must be a mapping")
            kwargs[name] = _from_dict(_SECTIONS[name], value, f"{path}{name}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "self_paced": SelfPacedSection,
    "pretrain": PretrainSection,
    "semisup": SemiSupSection,
    "augment": AugmentSection,
    "ablation": AblationSection,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise InvalidConfig("config root must be a mapping")
    return _from_dict(ExperimentConfig, data, "")


def config_to_dict(config: ExperimentConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(config)))


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise InvalidConfig(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply dotted-path assignments (flags win over the file)."""
    for text in overrides:
        path, value = _parse_override(text)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InvalidConfig(f"cannot descend into {part!r} in override {text!r}")
        node[path[-1]] = value
    return data


def load_config(path: str | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Config file (JSON) + --set overrides; either may be omitted."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise InvalidConfig(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config is not valid JSON: {exc}") from exc
    data = apply_overrides(data, overrides or [])
    return config_from_dict(data)


def save_effective_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n")

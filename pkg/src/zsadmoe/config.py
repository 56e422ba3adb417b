"""Run configuration: one TOML file covering every knob, unknown keys rejected.

Desk-scale defaults are the dataclass defaults. Full-scale values, for
reference: image 518x518, patch 14, 24 encoder layers tapped at 6/12/18/24,
D=768, N_q=8, E=8, k=4, 8 attention heads, router hidden 256, M_n=5, M_a=6,
M_q=8, alpha=0.01, beta=0.005, tau=0.07, tau'=0.01, sigma=4, 15 epochs, batch
16, lr 1e-3, 3 warm-up epochs, Adam betas (0.6, 0.999).
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import SyntheticClassSpec, default_class_specs
from .encoders import EncoderConfig
from .errors import ConfigurationError
from .model import ModelConfig
from .objective import LossConfig
from .scoring import ScoringConfig
from .vgmop import VGMoPConfig


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 1e-3
    warmup_epochs: int = 3
    beta1: float = 0.6
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0  # epochs between evaluations during training; 0 disables
    checkpoint: str = "model.ckpt"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigurationError("warmup_epochs must lie in [0, epochs]")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")


@dataclass
class DataConfig:
    n_per_class: int = 100
    seed: int = 0
    train_classes: List[str] = field(default_factory=lambda: ["A", "B", "C"])
    test_classes: List[str] = field(default_factory=lambda: ["D", "E"])
    classes: List[SyntheticClassSpec] = field(default_factory=default_class_specs)

    def __post_init__(self):
        self.classes = [c if isinstance(c, SyntheticClassSpec) else SyntheticClassSpec(**c) for c in self.classes]
        ids = {c.class_id for c in self.classes}
        for name in ("train_classes", "test_classes"):
            unknown = set(getattr(self, name)) - ids
            if unknown:
                raise ConfigurationError(f"data.{name} names unknown classes {sorted(unknown)}")
        shared = set(self.train_classes) & set(self.test_classes)
        if shared:
            raise ConfigurationError(f"train and test classes overlap: {sorted(shared)}")


@dataclass
class EvalConfig:
    fpr_limit: float = 0.3
    pro_thresholds: int = 200


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    vgmop: VGMoPConfig = field(default_factory=VGMoPConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.encoder, self.vgmop, self.scoring, seed=self.train.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        return _build(cls, raw, "")

    def with_overrides(self, overrides: List[str]) -> "RunConfig":
        raw = self.to_dict()
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
            section, _, name = key.strip().partition(".")
            if section not in raw or not isinstance(raw[section], dict) or name not in raw[section]:
                raise ConfigurationError(f"unknown config key {key.strip()!r}")
            try:
                parsed = tomllib.loads(f"v = {value.strip()}")["v"]
            except tomllib.TOMLDecodeError:
                parsed = value.strip()
            raw[section][name] = parsed
        return RunConfig.from_dict(raw)


SECTIONS = {
    "encoder": EncoderConfig,
    "vgmop": VGMoPConfig,
    "loss": LossConfig,
    "scoring": ScoringConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


def _build(klass, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{prefix or 'config'} must be a table")
    names = {f.name: f for f in dataclasses.fields(klass)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        where = f"{prefix}." if prefix else ""
        raise ConfigurationError(f"unknown config key {where}{unknown[0]!r}")
    kwargs = {}
    for key, value in raw.items():
        if klass is RunConfig:
            kwargs[key] = _build(SECTIONS[key], value, key)
        elif klass is DataConfig and key == "classes":
            kwargs[key] = [_build(SyntheticClassSpec, v, f"{prefix}.classes") for v in value]
        else:
            kwargs[key] = copy.deepcopy(value)
    try:
        return klass(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad value in [{prefix}]: {exc}") from None


def load_config(path: Optional[str]) -> RunConfig:
    """Load a TOML file, or a preset name (``default``, ``micro``, ``full``)."""
    if path is None or path == "default":
        return RunConfig()
    if path in PRESETS:
        return PRESETS[path]()
    p = Path(path)
    try:
        raw = tomllib.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {p}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"cannot parse {p}: {exc}") from None
    return RunConfig.from_dict(raw)


def micro_config() -> RunConfig:
    """Tiny model for gradient checks and smoke runs.

    A weaker token anchor keeps visual tokens spread out, so no gradient entry
    sinks below what float64 central differences can resolve.
    """
    return RunConfig(
        encoder=EncoderConfig(image_size=(32, 32), patch_size=8, depth=2, dim_x=12, dim=8, dim_joint=8,
                              layers=(1, 2), vision_heads=2, text_depth=1, text_heads=1, max_context=16,
                              token_anchor=0.5),
        vgmop=VGMoPConfig(n_experts=4, top_k=2, n_queries=3, len_normal=2, len_abnormal=3, len_context=2,
                          heads=2, router_hidden=8),
        train=TrainConfig(epochs=2, batch_size=4, warmup_epochs=1),
        data=DataConfig(n_per_class=8),
    )


def full_scale_config() -> RunConfig:
    """Full-scale hyperparameters (too heavy for a laptop CPU; provided for reference)."""
    return RunConfig(
        encoder=EncoderConfig(image_size=(518, 518), patch_size=14, depth=24, dim_x=1024, dim=768, dim_joint=768,
                              layers=(6, 12, 18, 24), vision_heads=16, text_depth=12, text_heads=12, max_context=77),
        vgmop=VGMoPConfig(n_experts=8, top_k=4, n_queries=8, len_normal=5, len_abnormal=6, len_context=8,
                          heads=8, router_hidden=256),
    )


PRESETS = {"default": RunConfig, "micro": micro_config, "full": full_scale_config}

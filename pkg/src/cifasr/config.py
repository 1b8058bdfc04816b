"""Configuration dataclasses and the JSON config document."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    num_blocks: int = 12
    d_model: int = 256
    num_heads: int = 4
    d_ffn: int = 2048
    conv_kernel_width: int = 15
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.d_model % self.num_heads:
            raise ConfigError("d_model must be divisible by num_heads")


@dataclass
class ModelConfig:
    feat_dim: int = 80
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    syllable_blocks: int = 4
    decoder_blocks: int = 6
    cif_threshold: float = 1.0
    cif_tail: float = 0.5
    # "syllable": match-module text branch reads syllables; "character": reads characters
    unit: str = "syllable"
    mae_stop_grad_text: bool = False
    n_chars: int = 4233
    n_sylls: int = 1300

    @property
    def d_model(self) -> int:
        return self.encoder.d_model

    @property
    def text_vocab(self) -> int:
        return self.n_sylls if self.unit == "syllable" else self.n_chars


@dataclass
class LossWeights:
    ctc: float = 0.5
    qua: float = 1.0
    ce: float = 0.5
    aed: float = 1.0
    mae: float = 1.0

    def __post_init__(self) -> None:
        if min(self.ctc, self.qua, self.ce, self.aed, self.mae) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class OptimConfig:
    lr: float = 0.002
    warmup: int = 25000
    clip: float = 5.0
    accum_steps: int = 4
    label_smoothing: float = 0.1


@dataclass
class TrainConfig:
    epochs: int = 240
    batch_size: int = 12
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    keep_best: int = 30
    spec_augment: bool = True
    time_masks: int = 2
    max_time_width: int = 10
    freq_masks: int = 2
    max_freq_width: int = 3
    dtype: str = "float64"


@dataclass
class AdaptConfig:
    epochs: int = 40
    batch_size: int = 12
    seed: int = 0
    interleave: float = 0.3
    optim: OptimConfig = field(default_factory=OptimConfig)
    keep_best: int = 1
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if not 0.0 <= self.interleave <= 1.0:
            raise ConfigError("interleave ratio must lie in [0, 1]")


@dataclass
class DecodeConfig:
    beam: int = 10
    nbest: int = 10
    ctc_weight: float = 0.5
    length_bonus: float = 0.0


@dataclass
class DataConfig:
    seed: int = 0
    n_chars: int = 40
    n_sylls: int = 24
    feat_dim: int = 16
    d_min: int = 8
    d_max: int = 16
    sigma: float = 0.3
    fanout: int = 5
    source_major_prob: float = 0.85
    target_major_prob: float = 0.3
    min_len: int = 4
    max_len: int = 10
    n_source_train: int = 2000
    n_source_dev: int = 200
    n_source_test: int = 200
    n_target_text: int = 2000
    n_target_dev: int = 200
    n_target_test: int = 200


@dataclass
class ExperimentConfig:
    """Unit comparison sweep: both match-module units trained on each seed."""

    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    units: list[str] = field(default_factory=lambda: ["syllable", "character"])
    # shorter schedules for the per-seed sweep; the main run uses train/adapt epochs
    sweep_train_epochs: int = 6
    sweep_adapt_epochs: int = 8
    sweep_eval_utts: int = 100
    # extra adaptations of the main baseline, compared against adapt.interleave
    ablate_interleave: list[float] = field(default_factory=lambda: [0.0])


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    base_dir: str = "."

    def resolve(self, path: str | Path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


# Desk-scale override block applied on top of the full-size defaults.
DESK_OVERRIDES: dict[str, Any] = {
    "model": {
        "feat_dim": 16,
        "encoder": {"num_blocks": 2, "d_model": 64, "num_heads": 4, "d_ffn": 256,
                    "conv_kernel_width": 7, "dropout": 0.1},
        "syllable_blocks": 2,
        "decoder_blocks": 2,
    },
    "train": {
        "epochs": 12,
        "batch_size": 12,
        "keep_best": 5,
        "optim": {"lr": 1.0, "warmup": 400, "accum_steps": 1},
    },
    "adapt": {
        "epochs": 20,
        "optim": {"lr": 0.1, "warmup": 200, "accum_steps": 1},
    },
}


def _merge(base, overrides: dict, where: str):
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name for f in dataclasses.fields(base)}
    unknown = set(overrides) - fields
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    changes = {}
    for name, value in overrides.items():
        cur = getattr(base, name)
        changes[name] = _merge(cur, value, f"{where}.{name}") if dataclasses.is_dataclass(cur) else value
    return dataclasses.replace(base, **changes)


def desk_config(**sections: dict) -> Config:
    cfg = _merge(Config(), DESK_OVERRIDES, "desk")
    return _merge(cfg, sections, "config") if sections else cfg


def config_from_dict(doc: dict, base_dir: str | Path = ".") -> Config:
    """Build a config; ``"profile"`` is ``"desk"`` (default, small model) or ``"full"`` (full-size defaults)."""
    doc = dict(doc)
    profile = doc.pop("profile", "desk")
    if profile not in ("desk", "full"):
        raise ConfigError(f"unknown profile {profile!r}")
    base = desk_config() if profile == "desk" else Config()
    cfg = _merge(base, doc, "config")
    cfg.base_dir = str(base_dir)
    return cfg


def load_config(path: str | Path) -> Config:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc, path.parent.resolve())


def config_to_dict(cfg: Config) -> dict:
    d = dataclasses.asdict(cfg)
    d.pop("base_dir", None)
    return d

"""Run configuration: a JSON key-value tree, schema-validated with unknown
keys rejected. The checked-in defaults carry the published hyperparameters
(lambda list, P-frame weights, learning rate 1e-4, 10 dB training CSNR,
GOP 4); see configs/default.json.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .channel import ChannelConfig
from .models import ArchConfig


class ConfigError(Exception):
    pass


@dataclass
class TrainConfig:
    stage: str = "iframe"  # iframe | pframe | gop_finetune
    lam: float = 1e-3
    wt: list[float] = field(default_factory=lambda: [0.5, 1.2, 0.9, 1.2])
    lr: float = 1e-4
    batch_iframe: int = 32
    batch_pframe: int = 2
    csnr_db: float = 10.0
    steps: int = 1000
    crop_size: int = 256
    entropy_pretrain_frac: float = 0.3
    tau_start: float = 5.0
    tau_end: float = 0.5
    flow_pretrain_steps: int = 2000
    nll_weight: float = 0.05
    feature_loss: str = "encoder_feature"  # encoder_feature | pixel_aux
    clip_frames: int = 5  # 1 I + 4 P per training clip
    policy_lr_multiplier: float = 3.0  # gating logits move on a faster clock
    init_checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError("lambda must be > 0")
        if self.stage not in ("iframe", "pframe", "gop_finetune"):
            raise ConfigError(f"unknown training stage {self.stage!r}")
        if len(self.wt) < max(0, self.clip_frames - 1):
            raise ConfigError(
                f"need at least {self.clip_frames - 1} per-P-frame weights, got {len(self.wt)}"
            )


@dataclass
class DatasetConfig:
    root: Optional[str] = None
    layout: str = "png_frames"
    synthetic: bool = True
    synthetic_frames: int = 5
    synthetic_size: list[int] = field(default_factory=lambda: [64, 64])
    synthetic_squares: int = 2
    synthetic_velocity: list[int] = field(default_factory=lambda: [0, 0])
    synthetic_clips: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    gop: int = 4
    lambda_values: list[float] = field(default_factory=lambda: [4e-3, 3e-3, 2e-3, 1e-3])
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    channel: ChannelConfig = field(default_factory=lambda: ChannelConfig("awgn", 10.0, 1.0, 0))
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "channel": ChannelConfig,
    "arch": ArchConfig,
    "train": TrainConfig,
}
# JSON spelling -> dataclass field (lambda is a Python keyword).
_KEY_ALIASES = {"lambda": "lam"}


def _build_section(cls, tree: dict, path: str):
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in tree.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def config_from_tree(tree: dict) -> RunConfig:
    if not isinstance(tree, dict):
        raise ConfigError("config root must be an object")
    known = {f.name for f in fields(RunConfig)}
    kwargs: dict[str, Any] = {}
    for key, value in tree.items():
        if key not in known:
            raise ConfigError(f"{key}: unknown key")
        if key in _SECTION_TYPES:
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        tree = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    return config_from_tree(tree)


def config_to_tree(cfg: RunConfig) -> dict:
    tree = asdict(cfg)
    tree["train"]["lambda"] = tree["train"].pop("lam")
    return tree


def write_effective_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    """Every command writes its fully-resolved configuration next to outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.json"
    path.write_text(json.dumps(config_to_tree(cfg), indent=2, sort_keys=True) + "\n")
    return path

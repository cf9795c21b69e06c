"""Experiment configuration: one nested YAML file, echoed into every output."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class DataConfig:
    image_size: int = 16
    background: int = 2000
    groups: int = 20
    replication: int = 100
    fresh: int = 40
    validation: int = 200
    dup_mode: str = "matching"      # "matching" or "template"
    template_variants: int = 4


@dataclass
class DiffusionConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.12
    spacing: str = "linear"
    variance_kind: str = "posterior"


@dataclass
class ModelConfig:
    N: int = 16
    width: int = 64
    layers: int = 4
    heads: int = 2
    patch: int = 2
    text_layers: int = 2
    self_attention: bool = True
    prediction: str = "v"
    text_heads: int = 4


@dataclass
class TrainConfig:
    pretrain_steps: int = 1500
    steps: int = 6000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    warmup: int = 100
    grad_clip: float = 1.0
    loss_weighting: str = "v"       # "eps": plain noise MSE; "v": noise MSE / alpha_bar_t (equals v-space MSE)
    freeze_encoder_after_pretrain: bool = False
    log_every: int = 0              # 0: once per epoch of the active data


@dataclass
class DetectConfig:
    T_D: int | None = None          # None: T // 5
    fpr_budget: float = 0.03
    layer: int | None = None        # None: report every layer


@dataclass
class MitigateConfig:
    C: float = 1.25
    mask_summary: bool = True
    sweep: list = field(default_factory=lambda: [1.0, 1.1, 1.25, 2.0])
    percentile: float = 5.0
    factor: float = 1.2


@dataclass
class AblateConfig:
    fractions: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])


@dataclass
class LabConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    mitigate: MitigateConfig = field(default_factory=MitigateConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def echo(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.echo(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".strip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(raw: dict | None) -> LabConfig:
    return _build(LabConfig, copy.deepcopy(raw) or {}, "")


def load_config(path=None, overrides: dict | None = None) -> LabConfig:
    """Read a YAML config and apply dotted-key overrides such as ``{"mitigate.C": 2.0}``."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return from_dict(raw)


def dump_config(cfg: LabConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.echo(), sort_keys=True))

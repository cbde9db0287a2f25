"""Experiment configuration: nested dataclasses loaded from YAML or dicts."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .corpus import AugmentConfig, CorpusConfig

WEAK_MODES = ("off", "expected_semantic", "expected_semantic_plus_wer", "reinforce_semantic", "reinforce_binary")


class ConfigError(ValueError):
    """Invalid or incomplete configuration; the message names the field."""


@dataclass(frozen=True)
class ModelConfig:
    enc_hidden: int = 32
    pred_hidden: int = 32
    embed_dim: int = 16
    joint_hidden: int = 32
    init_seed: int = 0


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 14
    lr: float = 3e-3
    batch_size: int = 16
    target_wer: float = 0.115
    seed: int = 0


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 300
    devices_per_round: int = 20
    local_steps: int = 1
    batch_size: int = 8
    local_lr: float = 0.1
    server_optimizer: str = "adam"
    server_lr: float = 1e-3


@dataclass(frozen=True)
class EMAConfig:
    enabled: bool = True
    rate: float = 0.99
    update_every: int = 10


@dataclass(frozen=True)
class FilterConfig:
    low: float = 0.05
    high: float = 0.95
    mode: str = "posterior"


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 8
    nbest: int = 4
    eval_decode: str = "greedy"


@dataclass(frozen=True)
class WeakConfig:
    mode: str = "off"
    noise_sigma: float = 0.0
    served_only: bool = False
    normalized: bool = True
    weight: float = 1.0


@dataclass(frozen=True)
class RehearsalConfig:
    enabled: bool = False
    ratio: float = 0.1
    batch_size: int = 8
    augment: bool = True


@dataclass(frozen=True)
class EvalConfig:
    every: int = 10
    divergence_threshold: float = 0.2
    divergence_patience: int = 3
    divergence_set: str = "general_old"
    abort_on_divergence: bool = False
    checkpoint_every: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    self_label: bool = True
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    ema: EMAConfig = field(default_factory=EMAConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    weak: WeakConfig = field(default_factory=WeakConfig)
    rehearsal: RehearsalConfig = field(default_factory=RehearsalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **changes):
        """Copy with dotted-path overrides, e.g. ``replace(**{"ema.rate": 0.9})``."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            keys = path.split(".")
            for k in keys[:-1]:
                node = node[k]
            node[keys[-1]] = value
        return from_dict(d)


_SECTIONS = {
    "corpus": CorpusConfig, "model": ModelConfig, "pretrain": PretrainConfig,
    "federation": FederationConfig, "ema": EMAConfig, "filter": FilterConfig,
    "decode": DecodeConfig, "augment": AugmentConfig, "weak": WeakConfig,
    "rehearsal": RehearsalConfig, "eval": EvalConfig,
}

REQUIRED = ("name", "seed", "federation.rounds", "federation.devices_per_round")


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{prefix}.{unknown[0]}: unknown field")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from exc


def from_dict(data, require=False):
    data = dict(data or {})
    if require:
        for path in REQUIRED:
            node = data
            for k in path.split("."):
                if not isinstance(node, dict) or k not in node:
                    raise ConfigError(f"{path}: missing required field")
                node = node[k]
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def load_config(path, require=True):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return from_dict(data, require=require)


def dump_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=True))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def validate(cfg):
    f = cfg.federation
    checks = [
        (f.rounds >= 0, "federation.rounds", "must be >= 0"),
        (f.devices_per_round >= 1, "federation.devices_per_round", "must be >= 1"),
        (f.local_steps >= 0, "federation.local_steps", "must be >= 0"),
        (f.batch_size >= 1, "federation.batch_size", "must be >= 1"),
        (f.local_lr > 0, "federation.local_lr", "must be > 0"),
        (f.server_lr > 0, "federation.server_lr", "must be > 0"),
        (f.server_optimizer in ("sgd", "adam"), "federation.server_optimizer", "must be 'sgd' or 'adam'"),
        (0.0 < cfg.ema.rate < 1.0, "ema.rate", "must lie in (0, 1)"),
        (cfg.ema.update_every >= 1, "ema.update_every", "must be >= 1"),
        (0.0 <= cfg.filter.low < cfg.filter.high <= 1.0, "filter.low", "need 0 <= low < high <= 1"),
        (cfg.filter.mode in ("posterior", "per_token"), "filter.mode", "must be 'posterior' or 'per_token'"),
        (cfg.decode.beam >= cfg.decode.nbest >= 1, "decode.beam", "need beam >= nbest >= 1"),
        (cfg.decode.eval_decode in ("greedy", "beam"), "decode.eval_decode", "must be 'greedy' or 'beam'"),
        (cfg.weak.mode in WEAK_MODES, "weak.mode", f"must be one of {WEAK_MODES}"),
        (cfg.weak.noise_sigma >= 0, "weak.noise_sigma", "must be >= 0"),
        (cfg.weak.noise_sigma == 0 or cfg.weak.mode == "reinforce_binary", "weak.noise_sigma",
         "noise is only defined for weak.mode=reinforce_binary"),
        (cfg.weak.weight >= 0, "weak.weight", "must be >= 0"),
        (cfg.rehearsal.ratio >= 0, "rehearsal.ratio", "must be >= 0"),
        (cfg.rehearsal.batch_size >= 1, "rehearsal.batch_size", "must be >= 1"),
        (cfg.eval.every >= 1, "eval.every", "must be >= 1"),
        (cfg.eval.checkpoint_every >= 0, "eval.checkpoint_every", "must be >= 0 (0 = final only)"),
        (cfg.eval.divergence_patience >= 1, "eval.divergence_patience", "must be >= 1"),
        (cfg.eval.divergence_set in ("general_old", "general_new", "delta"), "eval.divergence_set",
         "must name an eval set"),
        (cfg.self_label or cfg.weak.mode != "off" or cfg.rehearsal.enabled, "self_label",
         "no training signal: enable self_label, weak.mode or rehearsal"),
        (cfg.pretrain.epochs >= 0, "pretrain.epochs", "must be >= 0"),
    ]
    for ok, path, msg in checks:
        if not ok:
            raise ConfigError(f"{path}: {msg}")
    return cfg

"""Run configuration: one flat record, parseable from ``key = value`` text."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

MODES = ("pure", "unvp", "eunvp")


class ConfigError(ValueError):
    pass


@dataclass
class GeneralizationConfig:
    alpha: float = 0.1
    beta: float = 0.2
    K: int = 2
    T_max: int = 15
    eta_adv: float = 0.1
    feature_reg_weight: float = 1.0
    source_summary: str = "batch"
    ascent: str = "normalized"
    min_group: int = 4
    max_halvings: int = 8

    def __post_init__(self):
        for name in ("alpha", "beta", "K", "T_max", "eta_adv", "feature_reg_weight", "min_group", "max_halvings"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.beta > 1:
            raise ConfigError("beta must lie in [0, 1]")
        if self.ascent not in ("normalized", "plain"):
            raise ConfigError("ascent must be 'normalized' or 'plain'")
        if self.source_summary not in ("batch", "prior"):
            raise ConfigError("source_summary must be 'batch' or 'prior'")


@dataclass
class RunConfig:
    mode: str = "eunvp"
    # maximization phase
    alpha: float = 0.1
    beta: float = 0.2
    K: int = 2
    T_max: int = 15
    eta_adv: float = 0.1
    feature_reg_weight: float = 1.0
    source_summary: str = "batch"
    ascent: str = "normalized"
    # priors
    gamma: float = 1.0
    lam: float = 0.1
    noise_dim: Optional[int] = None
    # flow
    flow_blocks: int = 8
    flow_hidden: int = 64
    flow_res_blocks: int = 3
    flow_clamp: float = 2.0
    # classifier; empty hidden means the default for the input shape
    clf_hidden: str = ""
    # optimization
    optimizer: str = "adam"
    lr: float = 1e-4
    flow_lr: Optional[float] = None
    batch: int = 128
    epochs: int = 30
    pretrain_epochs: int = 5
    seed: int = 0
    # data
    dataset: str = "blobs"
    data_seed: Optional[int] = None
    n_classes: int = 3
    n_per_class: int = 100
    rotation: float = 30.0
    scale: float = 1.3
    shift_x: float = 0.0
    shift_y: float = 0.0
    subset: int = 2000
    corpus: str = "data/digits.unvpd"
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be adam or sgd")
        if self.lr <= 0 or (self.flow_lr is not None and self.flow_lr <= 0):
            raise ConfigError("learning rates must be positive")
        if self.batch < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("batch must be >= 1 and epoch counts >= 0")
        if self.gamma < 0 or self.lam < 0:
            raise ConfigError("gamma and lambda must be non-negative")
        if self.flow_blocks < 1:
            raise ConfigError("flow_blocks must be >= 1")
        self.generalization()

    @property
    def flow_enabled(self) -> bool:
        return self.mode != "pure"

    def generalization(self) -> GeneralizationConfig:
        return GeneralizationConfig(
            alpha=self.alpha,
            beta=self.beta,
            K=self.K if self.flow_enabled else 0,
            T_max=self.T_max,
            eta_adv=self.eta_adv,
            feature_reg_weight=self.feature_reg_weight,
            source_summary=self.source_summary,
            ascent=self.ascent,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Hash of every setting except the output location."""
        values = {k: v for k, v in self.to_dict().items() if k != "out"}
        return hashlib.sha256(json.dumps(values, sort_keys=True).encode()).hexdigest()[:16]

    def to_text(self) -> str:
        lines = [f"{k} = {'' if v is None else v}" for k, v in self.to_dict().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = ALIASES.get(key, key)
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key], raw)
        return cls(**kwargs)


ALIASES = {"lambda": "lam", "k": "K", "batch_size": "batch"}


def _coerce(f: dataclasses.Field, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    optional = kind.startswith("Optional")
    if optional and text in ("", "none", "None"):
        return None
    try:
        if "int" in kind:
            return int(text)
        if "float" in kind:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc
    return text


def parse_config_text(text: str) -> dict:
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def load_config(path, overrides: dict | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update(overrides or {})
    return RunConfig.from_dict(values)

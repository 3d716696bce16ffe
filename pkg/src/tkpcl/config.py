"""Run configuration: sectioned flat ``key=value`` files with typed overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .datagen import DatasetConfig
from .head import POOLING_MODES, PoolingConfig, check_epsilon
from .hv_bilstm import HvBilstmConfig
from .vit_encoder import EncoderConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 50
    lr_phase1: float = 1e-3
    phase1_epochs: int = 2
    lr_phase2: float = 1e-4
    k: int = 6
    epsilon: float = 0.85
    alpha: float = 0.01
    pooling_mode: str = "topk"
    pce_enabled: bool = True
    pce_classes: str = "present"  # "present" (image labels, no background) or "all"
    freeze_encoder: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 0 or self.phase1_epochs < 0:
            raise ConfigError("batch_size must be >= 1; epochs must be >= 0")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigError("learning rates must be positive")
        if self.pooling_mode not in POOLING_MODES:
            raise ConfigError(f"pooling_mode must be one of {POOLING_MODES}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        try:
            check_epsilon(self.epsilon)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.pce_classes not in ("present", "all"):
            raise ConfigError("pce_classes must be 'present' or 'all'")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam constants")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr_phase1 if epoch <= self.phase1_epochs else self.lr_phase2

    @property
    def pooling(self) -> PoolingConfig:
        return PoolingConfig(mode=self.pooling_mode, k=self.k)


@dataclass(frozen=True)
class LstmSection:
    hidden: int = 0  # 0 -> half the embedding width
    residual: bool = False
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lstm: LstmSection = field(default_factory=LstmSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    run_id: str = "default"

    @property
    def hv_bilstm(self) -> HvBilstmConfig:
        hidden = self.lstm.hidden or max(1, self.encoder.e // 2)
        return HvBilstmConfig(e=self.encoder.e, hidden=hidden, seed=self.lstm.seed, residual=self.lstm.residual)

    @property
    def n_total_classes(self) -> int:
        return self.dataset.n_classes + 1

    def validate(self) -> "RunConfig":
        try:
            self.dataset.validate()
            self.encoder.validate()
            self.hv_bilstm.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.train.validate()
        if not self.run_id:
            raise ConfigError("run_id must be non-empty")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with model-init and training seeds set to ``seed``."""
        return replace(
            self,
            encoder=replace(self.encoder, seed=seed),
            lstm=replace(self.lstm, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for section in SECTIONS:
            for f in fields(getattr(self, section)):
                out[f"{section}.{f.name}"] = getattr(getattr(self, section), f.name)
        out["output_dir"] = self.output_dir
        out["run_id"] = self.run_id
        return out

    def dumps(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self.to_flat().items())


SECTIONS = ("dataset", "encoder", "lstm", "train")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(raw: str, current: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def apply_overrides(config: RunConfig, items: dict[str, str]) -> RunConfig:
    sections = {name: dataclasses.asdict(getattr(config, name)) for name in SECTIONS}
    top = {"output_dir": config.output_dir, "run_id": config.run_id}
    for key, raw in items.items():
        if key in top:
            top[key] = raw.strip()
            continue
        section, _, name = key.partition(".")
        if section not in sections or name not in sections[section]:
            raise ConfigError(f"unknown config key {key!r}")
        sections[section][name] = _coerce(raw, sections[section][name], key)
    return RunConfig(
        dataset=DatasetConfig(**sections["dataset"]),
        encoder=EncoderConfig(**sections["encoder"]),
        lstm=LstmSection(**sections["lstm"]),
        train=TrainConfig(**sections["train"]),
        **top,
    )


def parse_lines(text: str) -> dict[str, str]:
    """``key=value`` per line; blank lines and ``#`` comments ignored; last write wins."""
    items: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        items[key.strip()] = value
    return items


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None,
                env: dict[str, str] | None = None) -> RunConfig:
    """File, then ``--set`` overrides in order, then ``TKP_SEED``; validated."""
    items: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        items.update(parse_lines(p.read_text()))
    for ov in overrides or []:
        items.update(parse_lines(ov))
    config = apply_overrides(RunConfig(), items)
    env = os.environ if env is None else env
    if env.get("TKP_SEED"):
        try:
            config = config.with_seed(int(env["TKP_SEED"]))
        except ValueError:
            raise ConfigError(f"TKP_SEED must be an integer, got {env['TKP_SEED']!r}") from None
    return config.validate()

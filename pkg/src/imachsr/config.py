"""Plain ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored; a leading ``[run]`` header is
optional.  Lists are comma separated.  Unknown keys are rejected.

==============  =========================================================
key             meaning (default)
==============  =========================================================
dataset         IMHS file (required)
split           fraction of samples used for training; rest is test (0.8)
model           layer preset name (desk12)
layers          explicit layer list, overrides ``model``
tap_rule        none | explicit_indices | pattern | after_downsample |
                between_blocks | at_bottleneck | around_attention | at_skip |
                near_normalization | at_fusion (none)
tap_indices     layer indices for explicit_indices
tap_count       pattern: number of taps M (1)
tap_spacing     pattern: spacing in bases (1)
tap_anchor      pattern: input | central | output (input)
base_layers     layers per base (2)
alpha, lambda   loss weights, scalar or one per tap (0.4, 0.1)
optimizer       adam | sgd (adam)
lr              learning rate (0.01)
epochs          training epochs T (30)
batch_size      mini-batch size B (8)
seed            run seed (0)
seeds           seed list used by ablations (seed)
out             output directory (run, next to the config file)
==============  =========================================================
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace

from .netspec import ModelSpec, TapCriterion, parse_layers, preset_spec, PRESETS
from .training import TrainingConfig


class ConfigError(ValueError):
    pass


KEYS = {
    "dataset", "split", "model", "layers", "tap_rule", "tap_indices", "tap_count", "tap_spacing",
    "tap_anchor", "base_layers", "alpha", "lambda", "optimizer", "lr", "epochs", "batch_size",
    "seed", "seeds", "out",
}


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


@dataclass
class RunConfig:
    dataset: str | None = None
    split: float = 0.8
    model: str = "desk12"
    layers: str | None = None
    tap_rule: str = "none"
    tap_indices: tuple[int, ...] = ()
    tap_count: int = 1
    tap_spacing: int = 1
    tap_anchor: str = "input"
    base_layers: int = 2
    alpha: list[float] = field(default_factory=lambda: [0.4])
    lam: list[float] = field(default_factory=lambda: [0.1])
    optimizer: str = "adam"
    lr: float = 0.01
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    seeds: tuple[int, ...] | None = None
    out: str = "run"

    @classmethod
    def from_text(cls, text: str, base_dir: str = ".") -> "RunConfig":
        stripped = text.lstrip()
        if not stripped.startswith("["):
            text = "[run]\n" + text
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        if parser.sections() != ["run"]:
            raise ConfigError(f"expected a single [run] section, got {parser.sections()}")
        raw = dict(parser["run"])
        unknown = sorted(set(raw) - KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kw = {}
        try:
            for key, value in raw.items():
                value = value.strip()
                if key in ("dataset", "out"):
                    kw[key] = value if os.path.isabs(value) else os.path.normpath(os.path.join(base_dir, value))
                elif key in ("model", "tap_rule", "tap_anchor", "optimizer"):
                    kw[key] = value
                elif key == "layers":
                    kw[key] = value
                elif key in ("split", "lr"):
                    kw[key] = float(value)
                elif key in ("tap_count", "tap_spacing", "base_layers", "epochs", "batch_size", "seed"):
                    kw[key] = int(value)
                elif key == "tap_indices":
                    kw[key] = tuple(_ints(value))
                elif key == "seeds":
                    kw[key] = tuple(_ints(value))
                elif key == "alpha":
                    kw["alpha"] = _floats(value)
                elif key == "lambda":
                    kw["lam"] = _floats(value)
        except ValueError as exc:
            raise ConfigError(f"bad value: {exc}") from None
        kw.setdefault("out", os.path.normpath(os.path.join(base_dir, "run")))
        cfg = cls(**kw)
        cfg.check()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            return cls.from_text(f.read(), base_dir=os.path.dirname(os.path.abspath(path)))

    def check(self, need_dataset: bool = True) -> None:
        if need_dataset:
            if not self.dataset:
                raise ConfigError("config needs a dataset path")
            if not os.path.exists(self.dataset):
                raise ConfigError(f"dataset not found: {self.dataset}")
        if not 0 < self.split <= 1:
            raise ConfigError("split must lie in (0, 1]")
        if self.layers is None and self.model not in PRESETS:
            raise ConfigError(f"unknown model preset {self.model!r}; choose from {sorted(PRESETS)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if any(a < 0 for a in self.alpha) or any(v < 0 for v in self.lam):
            raise ConfigError("alpha and lambda must be non-negative")

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    @property
    def seed_list(self) -> tuple[int, ...]:
        return self.seeds if self.seeds else (self.seed,)

    def model_spec(self, in_channels: int, height: int, width: int, num_classes: int) -> ModelSpec:
        if self.layers:
            return ModelSpec(in_channels, height, width, num_classes, parse_layers(self.layers))
        return preset_spec(self.model, in_channels, height, width, num_classes)

    def criterion(self) -> TapCriterion:
        return TapCriterion(
            rule=self.tap_rule,
            indices=self.tap_indices,
            count=self.tap_count,
            spacing_bases=self.tap_spacing,
            anchor=self.tap_anchor,
            base_layers=self.base_layers,
        )

    def training_config(self, criterion: TapCriterion | None = None, seed: int | None = None) -> TrainingConfig:
        return TrainingConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed if seed is None else seed,
            criterion=criterion or self.criterion(),
            alpha=self.alpha,
            lam=self.lam,
            optimizer=self.optimizer,
            lr=self.lr,
        )

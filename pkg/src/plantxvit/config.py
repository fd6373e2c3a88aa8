"""Run configuration: sectioned ``key = value`` files checked against a schema."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .layers import InceptionConfig
from .model import PlantXViTConfig
from .training import OPTIMIZERS, TrainConfig


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _optimizer_list(text: str) -> list[str]:
    kinds = [v.strip().lower() for v in text.split(",") if v.strip()]
    bad = [k for k in kinds if k not in OPTIMIZERS]
    if bad or not kinds:
        raise ValueError(f"unknown optimizer {bad[0] if bad else text!r}; choose from {', '.join(OPTIMIZERS)}")
    return kinds


def _inception(text: str) -> InceptionConfig:
    name = text.strip().lower()
    if name in ("default", "canonical"):
        return InceptionConfig()
    if name == "factorized_small":
        return InceptionConfig.factorized_small()
    return InceptionConfig.from_widths(_int_list(text))


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


SCHEMA = {
    "model": {
        "input_size": int, "num_classes": int, "patch_size": _int_list, "inception": _inception,
        "depth": int, "embed_dim": int, "heads": int, "key_dim": int, "mlp_hidden": int,
    },
    "train": {
        "epochs": int, "batch": int, "optimizer": _optimizer_list, "lr": float, "seed": int,
        "splits": _float_list, "clip_norm": _optional_float,
    },
    "paths": {
        "data": str, "checkpoint": str, "report_dir": str, "init_checkpoint": str, "init_prefix": str,
    },
}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def get(self, section: str, key: str, default=None):
        return getattr(self, section).get(key, default)

    def set(self, section: str, key: str, value) -> None:
        """Store an already-typed value (flags override file values this way)."""
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key [{section}] {key}")
        if value is not None:
            getattr(self, section)[key] = value

    def patch_sizes(self) -> list[int]:
        return list(self.get("model", "patch_size", [5]))

    def optimizers(self) -> list[str]:
        return list(self.get("train", "optimizer", ["adam"]))

    def model_config(self, patch_size: int | None = None, num_classes: int | None = None) -> PlantXViTConfig:
        m = self.model
        try:
            return PlantXViTConfig(
                input_size=m.get("input_size", 224),
                num_classes=num_classes if num_classes is not None else m.get("num_classes", 4),
                patch_size=patch_size if patch_size is not None else self.patch_sizes()[0],
                inception=m.get("inception", InceptionConfig()),
                transformer_depth=m.get("depth", 4),
                embed_dim=m.get("embed_dim", 16),
                heads=m.get("heads", 4),
                key_dim=m.get("key_dim", 16),
                mlp_hidden=m.get("mlp_hidden", 32),
                seed=self.get("train", "seed", 0),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self, optimizer: str | None = None) -> TrainConfig:
        t = self.train
        try:
            return TrainConfig(epochs=t.get("epochs", 10), batch_size=t.get("batch", 16),
                               optimizer=optimizer or self.optimizers()[0],
                               learning_rate=t.get("lr", 1e-4), seed=t.get("seed", 0),
                               splits=tuple(t.get("splits", (0.8, 0.1, 0.1))),
                               clip_norm=t.get("clip_norm"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_ini(self) -> str:
        lines = []
        for section in SCHEMA:
            values = getattr(self, section)
            if not values:
                continue
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if isinstance(value, InceptionConfig):
        return ", ".join(map(str, value.widths()))
    if isinstance(value, (list, tuple)):
        return ", ".join(map(str, value))
    return str(value)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key [{section}] {key}")
            try:
                value = SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {key} = {raw!r}: {exc}") from exc
            getattr(cfg, section)[key] = value
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))

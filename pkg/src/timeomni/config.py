"""Run configuration: one TOML file with model/train/data/eval sections."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, field_name: str, detail: str):
        super().__init__(f"config field {field_name!r}: {detail}")
        self.field = field_name


@dataclass
class DataConfig:
    train: Path | None = None
    eval: Path | None = None


@dataclass
class EvalConfig:
    model_name: str = "TimeOmni"
    compare: list[Path] = field(default_factory=list)
    workers: int = 1


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    eval: EvalConfig
    seed: int = 0
    out_dir: Path = Path("runs/default")
    text: str = ""
    path: Path | None = None

    def require(self, field_name: str) -> Path:
        """Return a configured path, raising ConfigError if unset or missing."""
        section, key = field_name.split(".")
        value = getattr(getattr(self, section), key)
        if value is None:
            raise ConfigError(field_name, "not set")
        if not Path(value).exists():
            raise ConfigError(field_name, f"path does not exist: {value}")
        return Path(value)


def _section(raw: dict, name: str, cls, where: str) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(name, "expected a table")
    allowed = {f.name for f in fields(cls)}
    for k in sec:
        if k not in allowed:
            raise ConfigError(f"{name}.{k}", "unknown key")
    return dict(sec)


def parse_config(text: str, base: Path | None = None, path: Path | None = None) -> RunConfig:
    base = base or Path(".")
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("<file>", str(exc)) from None
    for k in raw:
        if k not in ("seed", "out_dir", "model", "train", "data", "eval"):
            raise ConfigError(k, "unknown key")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed", "expected an integer")
    try:
        model = ModelConfig(**_section(raw, "model", ModelConfig, "model"))
    except (TypeError, ValueError) as exc:
        raise ConfigError("model", str(exc)) from None
    tsec = _section(raw, "train", TrainConfig, "train")
    tsec.setdefault("seed", seed)
    try:
        train = TrainConfig(**tsec)
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from None
    dsec = _section(raw, "data", DataConfig, "data")
    data = DataConfig(**{k: base / v for k, v in dsec.items()})
    esec = _section(raw, "eval", EvalConfig, "eval")
    if "compare" in esec:
        esec["compare"] = [base / p for p in esec["compare"]]
    ev = EvalConfig(**esec)
    out_dir = base / raw.get("out_dir", "runs/default")
    return RunConfig(model, train, data, ev, seed, out_dir, text, path)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"file not found: {path}")
    text = path.read_bytes().decode("utf-8")
    return parse_config(text, path.parent, path)

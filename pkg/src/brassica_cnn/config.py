"""Line-oriented ``key = value`` run configuration.

Blank lines and lines starting with ``#`` are ignored.  Unknown keys and
values that fail validation raise :class:`ConfigError`.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .net import ARCHITECTURES
from .train import ConfigError, TrainConfig

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass
class Config:
    data_root: str = "data"
    architecture: str = "brassica"
    train_ratio: float = 0.5
    val_ratio: float = 0.2
    test_ratio: float = 0.3
    split_seed: int = 0
    seed: int = 0
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_each_epoch: bool = True
    plateau_patience: int = 0
    checkpoint: str = ""
    out_dir: str = "runs/latest"
    strict_deterministic: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {sorted(ARCHITECTURES)}, got {self.architecture!r}")
        ratios = self.ratios
        if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be positive and sum to 1, got {ratios}")
        if self.seed < 0 or self.split_seed < 0:
            raise ConfigError("seeds must be non-negative")
        self.train_config()

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.train_ratio, self.val_ratio, self.test_ratio)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            seed=self.seed,
            shuffle_each_epoch=self.shuffle_each_epoch,
            plateau_patience=self.plateau_patience,
            strict_deterministic=self.strict_deterministic,
        )

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "final.ckpt"


_TYPES = {f.name: f.type for f in fields(Config)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind in ("bool", bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> Config:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return Config(**values)


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg: Config) -> str:
    lines = []
    for f in fields(Config):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"

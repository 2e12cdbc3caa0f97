"""Run configuration: flat ``key = value`` text with dotted section names.

Example::

    arch = cnn-s
    epochs = 8
    seed = 0
    data.kind = idx
    data.train_images = mnist/train-images-idx3-ubyte
    sgd.lr = 0:0.1,3:0.01
    ra_schedule = 0:1.0,0.25:0.8,0.5:0.6,0.75:0.4
    retrain.enabled = true
    retrain.reg_c = 4,2
    retrain.mu = 1.0
    retrain.mp_batch_size = 1024

Blank lines and ``#`` comments are ignored. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .scheduler import RateSchedule, parse_pairs


@dataclass
class DataSpec:
    kind: str = "blobs"  # blobs | spirals | idx | csv
    n_per_class: int = 200
    test_per_class: int = 100
    num_classes: int = 3
    noise: float = 0.1
    seed: int = 0
    image_shape: tuple[int, int, int] | None = None
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_csv: str = ""
    test_csv: str = ""
    train_limit: int | None = None
    test_limit: int | None = None


@dataclass
class TrainConfig:
    arch: str = "mlp"
    hidden: tuple[int, ...] | None = None
    epochs: int = 8
    seed: int = 0
    data: DataSpec = field(default_factory=DataSpec)
    sgd_lr: str = "0:0.1"
    sgd_momentum: float = 0.0
    sgd_mini_batch: int = 32
    ra_schedule: str = "0:1.0"
    retrain_enabled: bool = True
    retrain_reg_c: tuple[float, ...] = (4.0,)
    retrain_mu: float = 1.0
    retrain_mp_batch_size: int = 1024
    retrain_dropout_rate: float = 0.0
    retrain_pullback: str = "after"
    metrics_wall_clock: bool = False
    output_dir: str = "runs/latest"

    def validate(self) -> TrainConfig:
        from .network import ARCHS

        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 < self.retrain_mu <= 1.0:
            raise ConfigError(f"retrain.mu must be in (0, 1], got {self.retrain_mu}")
        if not self.retrain_reg_c or any(c <= 0 for c in self.retrain_reg_c):
            raise ConfigError("retrain.reg_c values must be > 0")
        if self.retrain_mp_batch_size < 1 or self.sgd_mini_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 0.0 <= self.retrain_dropout_rate < 1.0:
            raise ConfigError("retrain.dropout_rate must be in [0, 1)")
        if self.retrain_pullback not in ("after", "before"):
            raise ConfigError(f"retrain.pullback must be 'after' or 'before', got {self.retrain_pullback!r}")
        if self.sgd_momentum < 0:
            raise ConfigError("sgd.momentum must be >= 0")
        if self.data.kind not in ("blobs", "spirals", "idx", "csv"):
            raise ConfigError(f"unknown data.kind {self.data.kind!r}")
        self.schedule()
        self.sgd()
        return self

    def schedule(self) -> RateSchedule:
        return RateSchedule.parse(self.ra_schedule, self.epochs)

    def sgd(self):
        from .network import SgdConfig

        try:
            lr = tuple((int(e), v) for e, v in parse_pairs(self.sgd_lr))
            return SgdConfig(lr=lr, momentum=self.sgd_momentum, mini_batch=self.sgd_mini_batch, seed=self.seed)
        except ValueError as exc:
            raise ConfigError(f"sgd: {exc}") from None

    def to_text(self) -> str:
        lines = []
        for key, value in _flatten(self):
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _flatten(cfg: TrainConfig):
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "data":
            for g in dataclasses.fields(value):
                yield f"data.{g.name}", getattr(value, g.name)
        else:
            yield _KEY_OF.get(f.name, f.name), value


# dotted config key -> TrainConfig attribute
_ATTR_OF = {
    "sgd.lr": "sgd_lr",
    "sgd.momentum": "sgd_momentum",
    "sgd.mini_batch": "sgd_mini_batch",
    "retrain.enabled": "retrain_enabled",
    "retrain.reg_c": "retrain_reg_c",
    "retrain.mu": "retrain_mu",
    "retrain.mp_batch_size": "retrain_mp_batch_size",
    "retrain.dropout_rate": "retrain_dropout_rate",
    "retrain.pullback": "retrain_pullback",
    "metrics.wall_clock": "metrics_wall_clock",
}
_KEY_OF = {v: k for k, v in _ATTR_OF.items()}


def _convert(raw: str, current, type_hint: str, key: str):
    raw = raw.strip()
    try:
        if "bool" in type_hint:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if type_hint.startswith("tuple[float"):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if type_hint.startswith("tuple[int"):
            if not raw:
                return None
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if type_hint.startswith("int"):
            return None if raw == "" and "None" in type_hint else int(raw)
        if type_hint.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def apply_setting(cfg: TrainConfig, key: str, raw: str) -> None:
    key = key.strip()
    if key.startswith("data."):
        target, name = cfg.data, key[5:]
    else:
        target, name = cfg, _ATTR_OF.get(key, key)
    hints = {f.name: str(f.type) for f in dataclasses.fields(target)}
    if name not in hints or name == "data":
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _convert(raw, getattr(target, name), hints[name], key))


def parse_config(text: str) -> TrainConfig:
    cfg = TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        apply_setting(cfg, key, value)
    return cfg.validate()


_PATH_FIELDS = ("train_images", "train_labels", "test_images", "test_labels", "train_csv", "test_csv")


def load_config(path) -> TrainConfig:
    """Parse a config file; relative data paths resolve against the file's directory.

    An unreadable file raises ``OSError``; bad content raises ``ConfigError``.
    """
    cfg = parse_config(Path(path).read_text())
    base = Path(path).resolve().parent
    for name in _PATH_FIELDS:
        value = getattr(cfg.data, name)
        if value and not Path(value).is_absolute():
            setattr(cfg.data, name, str(base / value))
    return cfg

"""Training configuration and its flat text format.

The config file is one ``key = value`` per line; keys must match
TrainConfig field names exactly and unknown keys are rejected so typos
fail fast. Blank lines and ``#`` comments are allowed.
"""

from dataclasses import dataclass, fields
from pathlib import Path

from cxr_sslx.errors import ConfigError

INIT_MODES = ("scratch", "transfer", "transfer_ssl", "ssl_only")
LOSS_VARIANTS = ("paper", "byol_symmetric")

DEFAULT_CLASS_NAMES = ("COVID", "LungOpacity", "Normal", "ViralPneumonia")


@dataclass
class TrainConfig:
    """All hyperparameters for the three training stages.

    The numeric defaults are the published operating point of the method:
    40 self-supervised epochs, 30 fine-tuning epochs, batch 256, SGD with
    learning rate 0.03 / momentum 0.9 / weight decay 0.0004, target
    moving-average coefficient 0.996, projector hidden width 4096,
    projection width 256, and 128x128 views.
    """

    ssl_epochs: int = 40
    finetune_epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.0004
    tau: float = 0.996
    mlp_hidden: int = 4096
    projection_size: int = 256
    view_size: int = 128
    init_mode: str = "transfer_ssl"
    label_fraction: float = 1.0
    seed: int = 0
    loss_variant: str = "paper"

    # artifact plumbing beyond the published table
    backbone: str = "resnet50"
    train_ratio: float = 0.8
    finetune_image_size: int = 128
    input_mean: float = 0.5
    input_std: float = 0.25
    class_names: tuple = DEFAULT_CLASS_NAMES

    # view-generation policy
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    flip_probability: float = 0.5
    blur_probability: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError(
                f"label_fraction must be in (0, 1], got {self.label_fraction}"
            )
        if not 0.0 < self.train_ratio < 1.0:
            raise ConfigError(f"train_ratio must be in (0, 1), got {self.train_ratio}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(
                f"loss_variant must be one of {LOSS_VARIANTS}, got {self.loss_variant!r}"
            )
        for name in ("ssl_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "mlp_hidden", "projection_size", "view_size",
                     "finetune_image_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            raise ConfigError("crop scale range must satisfy 0 < min <= max <= 1")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError("flip_probability must be in [0, 1]")
        if not 0.0 <= self.blur_probability <= 1.0:
            raise ConfigError("blur_probability must be in [0, 1]")
        if not 0.0 < self.blur_sigma_min <= self.blur_sigma_max:
            raise ConfigError("blur sigma range must satisfy 0 < min <= max")
        if self.input_std <= 0:
            raise ConfigError("input_std must be > 0")
        if isinstance(self.class_names, (list, tuple)):
            self.class_names = tuple(str(c) for c in self.class_names)
        else:
            raise ConfigError("class_names must be a sequence of names")

    def replace(self, **overrides) -> "TrainConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(overrides)
        return TrainConfig(**values)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(field_type: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if field_type == "int":
            return int(raw)
        if field_type == "float":
            return float(raw)
        if field_type == "tuple":
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def format_config(config: TrainConfig) -> str:
    """Canonical text rendering, stable field order. Round-trips through
    parse_config exactly."""
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}" for f in fields(TrainConfig)]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> tuple[TrainConfig, set]:
    """Parse config text. Returns (config, keys that were present)."""
    field_types = {f.name: f.type if isinstance(f.type, str) else f.type.__name__
                   for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in field_types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(field_types[key], raw, key)
    config = TrainConfig(**values)
    return config, set(values)


def load_config(path) -> tuple[TrainConfig, set]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())

"""Line-based run configuration: sections of key=value pairs.

The format is deliberately trivial — ``[section]`` headers, one ``key =
value`` per line, ``#`` comments — so configs stay diff-friendly and
parseable from any language. Every key has a documented default; parsing
an empty document yields the default run.

Sample document::

    [data]
    dataset = digits
    data_dir = data

    [model]
    stem_channels = 16
    gated_channels = 16, 16, 32, 32
    gated_strides = 2, 1, 2, 1

    [train]
    eta = 0.5
    lambda_prime = 0.005
    gamma = 10
    epochs = 30
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields as dataclass_fields, replace
from typing import Optional, Tuple

from manidp.network import NetworkSpec
from manidp.training import TrainConfig


class ConfigError(ValueError):
    """A configuration document failed to parse or validate."""


DATASETS = ("digits", "mnist", "cifar10")
MODES = ("dynamic", "vanilla", "static-baseline")

_DATASET_SHAPES = {
    "digits": (1, 10),
    "mnist": (1, 10),
    "cifar10": (3, 10),
}


@dataclass
class RunConfig:
    """Everything one training run needs: data, architecture, schedule, output.

    ``mode`` selects the objective: ``dynamic`` is the full adaptive
    objective, ``vanilla`` disables gating and both regularizers, and
    ``static-baseline`` trains with a group-lasso penalty instead of
    per-instance saliency sparsity (and must set ``group_lasso_weight``).
    """

    dataset: str = "digits"
    data_dir: Optional[str] = None
    augment: Optional[bool] = None
    crop_pad: Optional[int] = None
    flip: Optional[bool] = None

    stem_channels: int = 16
    gated_channels: Tuple[int, ...] = (16, 16, 32, 32)
    gated_strides: Tuple[int, ...] = (2, 1, 2, 1)
    kernel_size: int = 3
    stem_stride: int = 1
    reduction_ratio: int = 4

    mode: str = "dynamic"
    adaptive: bool = True
    group_lasso_weight: float = 0.0
    out_dir: str = "runs"
    checkpoint_every: int = 0

    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            eta=0.5,
            warmup_epochs=10,
            epochs=30,
            learning_rate=1e-3,
            momentum=0.9,
            weight_decay=1e-4,
            batch_size=32,
            lambda_prime=0.005,
            gamma=10.0,
            seed=0,
        )
    )

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(
                f"dataset must be one of {DATASETS}, got {self.dataset!r}"
            )
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "static-baseline" and self.group_lasso_weight <= 0:
            raise ConfigError(
                "static-baseline mode requires group_lasso_weight > 0"
            )
        if self.crop_pad is not None and self.crop_pad < 0:
            raise ConfigError(f"crop_pad must be >= 0, got {self.crop_pad}")
        if self.checkpoint_every < 0:
            raise ConfigError(
                f"checkpoint_every must be >= 0, got {self.checkpoint_every}"
            )

    def network_spec(self) -> NetworkSpec:
        in_channels, num_classes = _DATASET_SHAPES[self.dataset]
        return NetworkSpec(
            in_channels=in_channels,
            num_classes=num_classes,
            stem_channels=self.stem_channels,
            gated_channels=self.gated_channels,
            gated_strides=self.gated_strides,
            kernel_size=self.kernel_size,
            stem_stride=self.stem_stride,
            reduction_ratio=self.reduction_ratio,
        )

    def augmentation(self) -> Tuple[bool, int, bool]:
        """Resolved (enabled, crop_pad, flip): CIFAR defaults on, others off."""
        enabled = self.augment if self.augment is not None else self.dataset == "cifar10"
        pad = self.crop_pad if self.crop_pad is not None else (
            4 if self.dataset == "cifar10" else 2
        )
        flip = self.flip if self.flip is not None else self.dataset == "cifar10"
        return enabled, pad, flip


# -- parsing ---------------------------------------------------------------------


_BOOL_WORDS = {
    "true": True,
    "yes": True,
    "on": True,
    "1": True,
    "false": False,
    "no": False,
    "off": False,
    "0": False,
}


def _parse_bool(raw: str, where: str) -> bool:
    try:
        return _BOOL_WORDS[raw.strip().lower()]
    except KeyError:
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}") from None


def _parse_int(raw: str, where: str) -> int:
    try:
        return int(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None


def _parse_float(raw: str, where: str) -> float:
    try:
        return float(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {raw!r}") from None


def _parse_int_tuple(raw: str, where: str) -> Tuple[int, ...]:
    items = [piece for piece in raw.replace(",", " ").split() if piece]
    if not items:
        raise ConfigError(f"{where}: expected a comma-separated list of integers")
    return tuple(_parse_int(piece, where) for piece in items)


def _parse_float_tuple(raw: str, where: str) -> Tuple[float, ...]:
    items = [piece for piece in raw.replace(",", " ").split() if piece]
    return tuple(_parse_float(piece, where) for piece in items)


def _parse_str(raw: str, where: str) -> str:
    return raw.strip()


# (section, key) -> (target attribute, parser); train.* keys land on TrainConfig
_SCHEMA = {
    ("data", "dataset"): ("dataset", _parse_str),
    ("data", "data_dir"): ("data_dir", _parse_str),
    ("data", "augment"): ("augment", _parse_bool),
    ("data", "crop_pad"): ("crop_pad", _parse_int),
    ("data", "flip"): ("flip", _parse_bool),
    ("model", "stem_channels"): ("stem_channels", _parse_int),
    ("model", "gated_channels"): ("gated_channels", _parse_int_tuple),
    ("model", "gated_strides"): ("gated_strides", _parse_int_tuple),
    ("model", "kernel_size"): ("kernel_size", _parse_int),
    ("model", "stem_stride"): ("stem_stride", _parse_int),
    ("model", "reduction_ratio"): ("reduction_ratio", _parse_int),
    ("train", "eta"): ("eta", _parse_float),
    ("train", "warmup_epochs"): ("warmup_epochs", _parse_int),
    ("train", "epochs"): ("epochs", _parse_int),
    ("train", "learning_rate"): ("learning_rate", _parse_float),
    ("train", "lr_warmup_epochs"): ("lr_warmup_epochs", _parse_int),
    ("train", "lr_milestones"): ("lr_milestones", _parse_float_tuple),
    ("train", "lr_decay"): ("lr_decay", _parse_float),
    ("train", "momentum"): ("momentum", _parse_float),
    ("train", "weight_decay"): ("weight_decay", _parse_float),
    ("train", "batch_size"): ("batch_size", _parse_int),
    ("train", "lambda_prime"): ("lambda_prime", _parse_float),
    ("train", "gamma"): ("gamma", _parse_float),
    ("train", "seed"): ("seed", _parse_int),
    ("train", "mode"): ("mode", _parse_str),
    ("train", "adaptive"): ("adaptive", _parse_bool),
    ("train", "group_lasso_weight"): ("group_lasso_weight", _parse_float),
    ("output", "out_dir"): ("out_dir", _parse_str),
    ("output", "checkpoint_every"): ("checkpoint_every", _parse_int),
}

_TRAIN_FIELDS = {f.name for f in dataclass_fields(TrainConfig)}


def parse_config(text: str) -> RunConfig:
    """Parse a configuration document into a validated RunConfig.

    Unknown sections or keys, unparsable values, and constraint violations
    all raise ConfigError naming the offending key and line number.
    """
    run_values = {}
    train_values = {}
    section = None
    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if not any(sec == section for sec, _ in _SCHEMA):
                raise ConfigError(f"line {line_number}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(
                f"line {line_number}: expected 'key = value', got {raw_line.strip()!r}"
            )
        if section is None:
            raise ConfigError(
                f"line {line_number}: key outside any [section]: {raw_line.strip()!r}"
            )
        key, raw_value = (piece.strip() for piece in line.split("=", 1))
        where = f"line {line_number}: {section}.{key}"
        try:
            target, parser = _SCHEMA[(section, key.lower())]
        except KeyError:
            raise ConfigError(f"{where}: unknown key") from None
        value = parser(raw_value, where)
        if target in _TRAIN_FIELDS:
            train_values[target] = (value, where)
        else:
            run_values[target] = (value, where)

    train_kwargs = {name: value for name, (value, _) in train_values.items()}
    default_train = RunConfig.__dataclass_fields__["train"].default_factory()
    try:
        train = replace(default_train, **train_kwargs)
    except ValueError as exc:
        culprit = next(
            (where for name, (_, where) in train_values.items() if name in str(exc)),
            "[train]",
        )
        raise ConfigError(f"{culprit}: {exc}") from None
    run_kwargs = {name: value for name, (value, _) in run_values.items()}
    try:
        return RunConfig(train=train, **run_kwargs)
    except ConfigError as exc:
        culprit = next(
            (where for name, (_, where) in run_values.items() if name in str(exc)),
            None,
        )
        if culprit:
            raise ConfigError(f"{culprit}: {exc}") from None
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

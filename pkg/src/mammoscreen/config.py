"""Run configuration: one ``[run]`` section of ``key = value`` lines plus ``--set`` overrides.

Unknown keys, unparsable values and conflicting options raise ConfigError.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .classifiers.dnn import DEFAULT_FUSION, Fusion
from .errors import ConfigError


class ModelKind(str, enum.Enum):
    LR = "lr"
    SVM = "svm"
    DNN = "dnn"


class Imbalance(str, enum.Enum):
    NONE = "none"
    CLASS_WEIGHTS = "class_weights"
    SBS = "sbs"
    UNDERSAMPLE = "undersample"
    OVERSAMPLE = "oversample"
    SMOTE = "smote"


@dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    model: ModelKind = ModelKind.LR
    # Logistic regression / SVM
    C: float = 1.0
    class_weights: tuple[float, float] | None = None  # None: N / (2 N_class) under class_weights mode
    gamma: float = 1.0 / 1002
    c0: float = 1.0
    degree: int = 3
    sketch_dim: int = 512
    # Network and optimizer
    fusion: Fusion = DEFAULT_FUSION
    lr: float | None = None  # Adam step; None picks the model default
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    max_iters: int = 1000
    patience: int | None = None
    min_delta: float = 0.0
    threshold: float = 0.5
    # Imbalance handling
    imbalance: Imbalance = Imbalance.CLASS_WEIGHTS
    ratio: float = 1.0  # minority:majority target for under/oversampling and SMOTE
    smote_k: int = 5
    val_fraction: float = 0.2
    # Paths
    metadata: str | None = None
    features: str | None = None
    output: str | None = None
    external_decoder: str | None = None
    # Synthetic corpus
    n: int = 5470
    separation: float = 2.0
    informative: int = 64

    def __post_init__(self):
        if self.class_weights is not None and self.imbalance is not Imbalance.CLASS_WEIGHTS:
            raise ConfigError(
                f"class_weights is set but imbalance = {self.imbalance.value}; choose exactly one imbalance mode"
            )
        if self.imbalance is Imbalance.SBS and self.model is not ModelKind.DNN:
            raise ConfigError("sbs sampling applies to mini-batch network training only (model = dnn)")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.C <= 0 or (self.lr is not None and self.lr <= 0) or self.max_iters < 0 or self.batch_size < 2:
            raise ConfigError("C and lr must be positive, max_iters >= 0, batch_size >= 2")
        if self.ratio <= 0 or self.smote_k < 1:
            raise ConfigError("ratio must be positive and smote_k >= 1")
        if self.degree < 1 or self.sketch_dim < 1:
            raise ConfigError("degree and sketch_dim must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")

    def adam_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 3e-4 if self.model is ModelKind.DNN else 0.05

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("seed is required")
        return self.seed

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, text: str):
    text = text.strip()
    default = _FIELDS[key].default
    try:
        if key == "class_weights":
            if text.lower() in ("", "auto"):
                return None
            parts = [float(p) for p in text.split(",")]
            if len(parts) != 2 or min(parts) < 0 or max(parts) == 0:
                raise ValueError
            return tuple(parts)
        if key == "lr":
            return None if text.lower() in ("", "auto") else float(text)
        if key in ("seed", "patience"):
            return None if text.lower() in ("", "none") else int(text)
        if key in ("metadata", "features", "output", "external_decoder"):
            return text or None
        if key == "model":
            return ModelKind(text.lower())
        if key == "imbalance":
            return Imbalance(text.lower())
        if key == "fusion":
            return Fusion(text)
        if isinstance(default, bool):
            raise ValueError
        if isinstance(default, int):
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_pairs(pairs: dict[str, str]) -> dict:
    values = {}
    for key, text in pairs.items():
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, text)
    return values


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read ``path`` (if given), then apply ``key=value`` overrides in order."""
    pairs: dict[str, str] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        extra = [s for s in parser.sections() if s != "run"]
        if extra:
            raise ConfigError(f"unexpected config sections {extra}; only [run] is allowed")
        if parser.has_section("run"):
            pairs.update(parser.items("run"))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        pairs[key.strip()] = value
    values = parse_pairs(pairs)
    imbalance = values.get("imbalance", Imbalance.CLASS_WEIGHTS)
    if "class_weights" in values and imbalance is not Imbalance.CLASS_WEIGHTS:
        raise ConfigError(
            f"class_weights is set but imbalance = {imbalance.value}; choose exactly one imbalance mode"
        )
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    lines = ["[run]"]
    for key, value in cfg.to_dict().items():
        if value is None:
            continue
        if isinstance(value, list):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"

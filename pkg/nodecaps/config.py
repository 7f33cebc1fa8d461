"""nodecaps configuration: environment paths and run hyperparameters."""

from __future__ import annotations

import dataclasses
import json
import math
import numbers
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    from dotenv import load_dotenv
    _DOTENV_AVAILABLE = True
except ModuleNotFoundError:  # pragma: no cover - optional fallback for minimal test envs
    _DOTENV_AVAILABLE = False

    def load_dotenv(*_args, **_kwargs):
        return False

from .errors import ValidationError

# Load config from ~/.nodecaps/nodecaps.env
CONFIG_DIR = Path(os.getenv("NODECAPS_CONFIG_DIR", Path.home() / ".nodecaps"))
ENV_FILE = CONFIG_DIR / "nodecaps.env"
if (
    not _DOTENV_AVAILABLE
    and ENV_FILE.exists()
    and "pytest" not in sys.modules
):  # pragma: no cover - import-time fallback
    warnings.warn(
        f"python-dotenv is not installed; {ENV_FILE} will not be loaded",
        RuntimeWarning,
        stacklevel=2,
    )
load_dotenv(ENV_FILE, override=True)

# Paths
PACKAGE_DIR = Path(__file__).parent
MANIFEST_DIR = PACKAGE_DIR / "manifests"
FIXTURE_DIR = PACKAGE_DIR / "fixtures"
DATA_DIR = Path(os.getenv("NODECAPS_DATA_DIR", CONFIG_DIR / "datasets"))
OUTPUT_DIR = Path(os.getenv("NODECAPS_OUTPUT_DIR", CONFIG_DIR / "runs"))
CACHE_DIR = Path(os.getenv("NODECAPS_CACHE_DIR", CONFIG_DIR / "cache"))
LOG_DIR = Path(os.getenv("NODECAPS_LOG_DIR", CONFIG_DIR / "logs"))

# Largest graph for which exact PPR is solved densely
DENSE_PPR_CAP = int(os.getenv("NODECAPS_DENSE_PPR_CAP", "4096"))

# Worker processes for sweeps (1 = run in-process)
WORKERS = int(os.getenv("NODECAPS_WORKERS", "1"))

# Short names accepted by `sweep --param` and config overrides
PARAM_ALIASES = {
    "K": "n_primary_caps",
    "T": "routing_iters",
    "f_p": "primary_dim",
    "f_c": "class_dim",
    "lambda": "loss_lambda",
    "lr": "learning_rate",
    "wd": "weight_decay",
    "max_hop": "filter.max_hop",
    "alpha": "filter.alpha",
    "truncation": "filter.truncation",
    "sparsify": "filter.sparsify",
    "mode": "filter.mode",
}

FILTER_MODES = ("attention", "ppr")


def _check_count(name: str, value: Any, minimum: int = 1) -> None:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValidationError(f"{name} must be an integer >= {minimum}, got {value!r}", field=name)


def _check_real(name: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ValidationError(f"{name} must be a number, got {value!r}", field=name)


@dataclass(frozen=True)
class FilterSpec:
    """How the graph filter is built: learned hop attention or fixed PPR."""

    mode: str = "attention"
    max_hop: int = 2
    alpha: float = 0.1
    truncation: int | None = None
    sparsify: str = "topk:128"
    final_sparsify: bool = False
    symmetrize: str = "both"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in FILTER_MODES:
            raise ValidationError(f"filter mode must be one of {FILTER_MODES}, got {self.mode!r}")
        _check_count("max_hop", self.max_hop)
        _check_real("alpha", self.alpha)
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.truncation is not None:
            _check_count("truncation", self.truncation, minimum=0)
        if self.symmetrize not in ("both", "either"):
            raise ValidationError(f"symmetrize must be 'both' or 'either', got {self.symmetrize!r}")
        _ = self.rule

    @property
    def hops(self) -> tuple[int, ...]:
        return tuple(range(1, self.max_hop + 1))

    @property
    def rule(self):
        from .filters import SparsifyRule

        return SparsifyRule.parse(self.sparsify)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> FilterSpec:
        if not isinstance(data, dict):
            raise ValidationError(f"filter must be an object, got {data!r}", field="filter")
        _reject_unknown(cls, data, "filter")
        return cls(**data)


@dataclass(frozen=True)
class TrainConfig:
    """Every hyperparameter of a run; serialized next to its artifacts."""

    primary_dim: int = 64
    class_dim: int = 16
    n_primary_caps: int = 8
    routing_iters: int = 3
    n_classes: int | None = None
    m_plus: float = 0.8
    m_minus: float = 0.2
    loss_lambda: float = 0.5
    learning_rate: float = 1e-3
    weight_decay: float = 5e-3
    decay_all: bool = False
    dropout_p: float = 0.9
    epochs: int = 200
    seed: int = 0
    split_seed: int = 0
    per_class_train: int = 20
    val_size: int = 500
    row_normalize_features: bool = False
    filter: FilterSpec = field(default_factory=FilterSpec)

    def __post_init__(self):
        if isinstance(self.filter, dict):
            object.__setattr__(self, "filter", FilterSpec.from_dict(self.filter))
        elif not isinstance(self.filter, FilterSpec):
            raise ValidationError(f"filter must be an object, got {self.filter!r}", field="filter")
        self.validate()

    def validate(self) -> None:
        for name in ("primary_dim", "class_dim", "n_primary_caps", "routing_iters", "per_class_train"):
            _check_count(name, getattr(self, name))
        _check_count("epochs", self.epochs, minimum=0)
        _check_count("val_size", self.val_size, minimum=0)
        _check_count("seed", self.seed, minimum=0)
        _check_count("split_seed", self.split_seed, minimum=0)
        if self.n_classes is not None:
            _check_count("n_classes", self.n_classes, minimum=2)
        for name in ("m_plus", "m_minus", "loss_lambda", "dropout_p", "learning_rate", "weight_decay"):
            _check_real(name, getattr(self, name))
        if not 0.0 < self.m_minus < self.m_plus < 1.0:
            raise ValidationError(
                f"margins must satisfy 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}"
            )
        if not self.loss_lambda > 0:
            raise ValidationError(f"loss_lambda must be positive, got {self.loss_lambda}")
        if not 0.0 < self.dropout_p < 1.0:
            raise ValidationError(f"dropout_p must lie in (0, 1), got {self.dropout_p}")
        for name in ("learning_rate", "weight_decay"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValidationError(f"{name} must be finite and non-negative, got {value}")

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["filter"] = self.filter.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        if not isinstance(data, dict):
            raise ValidationError(f"config must be an object, got {data!r}", field="config")
        _reject_unknown(cls, data, "config")
        data = dict(data)
        if "filter" in data:
            data["filter"] = FilterSpec.from_dict(data["filter"])
        return cls(**data)

    def replace(self, **overrides: Any) -> TrainConfig:
        """Copy with overrides; keys may be aliases or ``filter.<field>``."""
        top: dict[str, Any] = {}
        nested: dict[str, Any] = {}
        for key, value in overrides.items():
            key = PARAM_ALIASES.get(key, key)
            if key.startswith("filter."):
                nested[key.removeprefix("filter.")] = value
            else:
                top[key] = value
        _reject_unknown(TrainConfig, top, "config")
        _reject_unknown(FilterSpec, nested, "filter")
        if nested:
            top["filter"] = dataclasses.replace(self.filter, **nested)
        return dataclasses.replace(self, **top)

    def field_type(self, key: str) -> type:
        """Python type of a (possibly aliased) field, for parsing CLI strings."""
        key = PARAM_ALIASES.get(key, key)
        target = self.filter if key.startswith("filter.") else self
        name = key.removeprefix("filter.")
        try:
            value = getattr(target, name)
        except AttributeError:
            raise ValidationError(f"unknown parameter {key!r}") from None
        return type(value) if value is not None else int


def _reject_unknown(cls, data: dict[str, Any], label: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"unknown {label} keys: {', '.join(unknown)}")


def load_train_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return TrainConfig.from_dict(data)


# Per-corpus settings from the benchmark protocol
_PRESETS = {
    "cora": {"filter.alpha": 0.05, "weight_decay": 5e-3},
    "cora-ml": {"filter.alpha": 0.05, "weight_decay": 1e-2},
    "citeseer": {"filter.alpha": 0.1, "weight_decay": 5e-3},
    "pubmed": {"filter.alpha": 0.1, "weight_decay": 1e-2},
    "amazon-photo": {"filter.alpha": 0.1, "weight_decay": 1e-2},
    "amazon-computers": {"filter.alpha": 0.1, "weight_decay": 1e-2},
}


def preset_for(name: str, base: TrainConfig | None = None) -> TrainConfig:
    """Defaults for a known corpus; unknown names get ``base`` unchanged."""
    base = base or TrainConfig()
    overrides = _PRESETS.get(name.lower())
    return base.replace(**overrides) if overrides else base

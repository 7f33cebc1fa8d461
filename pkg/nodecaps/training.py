"""Margin loss, Adam, and the full-batch training loop.

Checkpoints are JSON: a format tag, the effective config, and one
``{"shape": [...], "values": [...]}`` record per parameter array. Floats are
written with ``repr`` precision and keys sorted, so equal parameters give
equal bytes.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import autodiff as ad
from .capsules import (
    WEIGHT_NAMES,
    CapsuleTensor,
    Filter,
    ModelParams,
    dropout_mask,
    forward,
    predict,
    taped_forward,
)
from .config import TrainConfig
from .data_io import row_normalize
from .errors import DivergenceError, FormatError, ShapeError, ValidationError
from .filter_cache import FilterCache, build_filter
from .graph import GraphDataset

__all__ = [
    "margin_loss",
    "AdamMoments",
    "adam_step",
    "EpochRecord",
    "TrainingHistory",
    "train",
    "prepare_features",
    "save_checkpoint",
    "load_checkpoint",
    "write_history",
    "read_history",
]

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_FORMAT = "nodecaps-checkpoint"
CHECKPOINT_VERSION = 1

RoutingHook = Callable[[int, int, np.ndarray, np.ndarray], None]


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def margin_loss(class_caps, labels, mask, cfg: TrainConfig):
    """Mean over masked nodes of the per-class squared hinge on capsule lengths.

    Accepts a CapsuleTensor, an array, or a taped Variable; returns a float
    for plain input and a Variable for taped input.
    """
    data = class_caps.data if isinstance(class_caps, CapsuleTensor) else class_caps
    n, n_classes = np.shape(ad.value_of(data))[:2]
    labels = np.asarray(labels, dtype=np.int64)
    index = np.flatnonzero(np.asarray(mask, dtype=bool))
    if labels.shape != (n,) or np.shape(mask) != (n,):
        raise ShapeError(f"labels and mask must have length {n}")
    if len(index) == 0:
        raise ValidationError("margin loss needs at least one masked node")

    target = np.zeros((len(index), n_classes))
    target[np.arange(len(index)), labels[index]] = 1.0

    lengths = ad.length(ad.gather_rows(data, index), axis=-1)
    present = ad.relu(ad.affine(lengths, -1.0, cfg.m_plus))
    absent = ad.relu(ad.affine(lengths, 1.0, -cfg.m_minus))
    per_class = ad.add(
        ad.mul(target, ad.square(present)),
        ad.mul(cfg.loss_lambda * (1.0 - target), ad.square(absent)),
    )
    total = ad.affine(ad.reduce_sum(per_class), 1.0 / len(index), 0.0)
    return total if isinstance(total, ad.Variable) else float(total)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamMoments:
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> AdamMoments:
        arrays = params.arrays()
        return cls(
            {k: np.zeros_like(v) for k, v in arrays.items()},
            {k: np.zeros_like(v) for k, v in arrays.items()},
        )


def adam_step(
    params: ModelParams,
    grads,
    cfg: TrainConfig,
    step: int,
    moments: AdamMoments | None = None,
) -> AdamMoments:
    """One Adam update; weight decay enters the gradient as 2 * wd * theta.

    ``step`` counts from 1. Decay covers the weight matrices only unless
    ``cfg.decay_all`` is set. Returns the updated moments.
    """
    if step < 1:
        raise ValidationError(f"Adam steps count from 1, got {step}")
    moments = moments or AdamMoments.zeros_like(params)
    arrays = params.arrays()
    decayed = set(arrays) if cfg.decay_all else set(WEIGHT_NAMES)

    checked = {}
    for name, value in arrays.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {value.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite gradient for {name} at step {step}", parameter=name, step=step
            )
        checked[name] = g

    # Nothing is touched until every gradient has passed.
    for name, value in arrays.items():
        g = checked[name]
        if cfg.weight_decay and name in decayed:
            g = g + 2.0 * cfg.weight_decay * value

        m = BETA1 * moments.first[name] + (1.0 - BETA1) * g
        v = BETA2 * moments.second[name] + (1.0 - BETA2) * g * g
        moments.first[name], moments.second[name] = m, v
        m_hat = m / (1.0 - BETA1**step)
        v_hat = v / (1.0 - BETA2**step)
        params.assign(name, value - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
    return moments


# ---------------------------------------------------------------------------
# History and checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float | None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float | None = None
    seconds: float = 0.0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def losses(self) -> list[float]:
        return [r.train_loss for r in self.records]


def write_history(history: TrainingHistory, path: str | Path) -> None:
    lines = [json.dumps(r.to_dict(), sort_keys=True) for r in history.records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_history(path: str | Path) -> list[EpochRecord]:
    records = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(EpochRecord(**json.loads(line)))
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"{path}:{number}: bad history record ({exc})", line_number=number) from exc
    return records


def save_checkpoint(
    params: ModelParams, cfg: TrainConfig, path: str | Path, *, epoch: int | None = None
) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "config": cfg.to_dict(),
        "arrays": {
            name: {"shape": list(value.shape), "values": [float(x) for x in value.ravel()]}
            for name, value in params.arrays().items()
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, TrainConfig]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: checkpoint is not valid JSON ({exc})", path=str(path)) from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a nodecaps checkpoint", path=str(path))
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint version {payload.get('version')}", path=str(path)
        )
    try:
        config = payload["config"]
        raw = {
            name: (np.array(record["values"], dtype=np.float64), tuple(record["shape"]))
            for name, record in payload["arrays"].items()
        }
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        raise FormatError(f"{path}: truncated or malformed checkpoint ({exc!r})", path=str(path)) from exc
    arrays = {}
    for name, (values, shape) in raw.items():
        try:
            arrays[name] = values.reshape(shape)
        except (ValueError, TypeError):
            raise FormatError(
                f"{path}: {name} has {values.size} values for shape {shape}", path=str(path)
            ) from None
    return ModelParams(arrays), TrainConfig.from_dict(config)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def prepare_features(dataset: GraphDataset, cfg: TrainConfig) -> np.ndarray:
    return row_normalize(dataset.features) if cfg.row_normalize_features else dataset.features


def init_params(dataset: GraphDataset, cfg: TrainConfig) -> ModelParams:
    n_hops = len(cfg.filter.hops) if cfg.filter.mode == "attention" else 1
    return ModelParams.initialize(
        dataset.n_features,
        dataset.n_classes,
        n_primary_caps=cfg.n_primary_caps,
        primary_dim=cfg.primary_dim,
        class_dim=cfg.class_dim,
        n_hops=n_hops,
        seed=cfg.seed,
    )


def _accuracy(params: ModelParams, features, filter: Filter, labels, mask, T: int) -> float | None:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    caps, _ = forward(features, filter, params, T)
    return float(np.mean(predict(caps)[mask] == labels[mask]))


def train(
    dataset: GraphDataset,
    cfg: TrainConfig,
    *,
    filter: Filter | None = None,
    cache: FilterCache | None = None,
    on_routing: RoutingHook | None = None,
) -> tuple[ModelParams, TrainingHistory]:
    """Full-batch training; returns the snapshot with the best validation accuracy.

    ``on_routing(epoch, t, couplings, class_caps)`` sees every routing pass of
    every training forward.
    """
    if cfg.n_classes is not None and cfg.n_classes != dataset.n_classes:
        raise ValidationError(
            f"config says {cfg.n_classes} classes but {dataset.name} has {dataset.n_classes}"
        )
    train_mask = dataset.mask("train")
    if not train_mask.any():
        raise ValidationError(f"{dataset.name}: train split is empty")
    val_mask = dataset.splits.get("val", np.zeros(dataset.n_nodes, dtype=bool))

    features = prepare_features(dataset, cfg)
    if filter is None:
        filter = build_filter(dataset.adjacency, cfg.filter, cache)
    params = init_params(dataset, cfg)
    history = TrainingHistory()
    if cfg.epochs == 0:
        return params, history

    started = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    mask_shape = (dataset.n_nodes, cfg.n_primary_caps, cfg.primary_dim)
    moments = AdamMoments.zeros_like(params)
    best: ModelParams | None = None
    T = cfg.routing_iters

    for epoch in range(1, cfg.epochs + 1):
        observer = None
        if on_routing is not None:
            observer = lambda t, c, v, epoch=epoch: on_routing(epoch, t, c, v)  # noqa: E731

        tape = ad.Tape()
        leaves = tape.watch(params)
        caps = taped_forward(
            leaves,
            features,
            filter,
            params,
            T,
            dropout_mask=dropout_mask(rng, mask_shape, cfg.dropout_p),
            observer=observer,
        )
        loss = margin_loss(caps, dataset.labels, train_mask, cfg)
        loss_value = float(loss.value)
        if not np.isfinite(loss_value):
            raise DivergenceError(f"loss became {loss_value} at epoch {epoch}", epoch=epoch)

        grads = ad.backward(tape, loss)
        for name, g in grads.items():
            params.grads[name][...] = g
        try:
            moments = adam_step(params, params.grads, cfg, epoch, moments)
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} (epoch {epoch})", epoch=epoch, **exc.fields) from exc
        params.zero_grad()

        val_acc = _accuracy(params, features, filter, dataset.labels, val_mask, T)
        history.records.append(EpochRecord(epoch, loss_value, val_acc))
        log.debug("epoch %d loss %.6f val %s", epoch, loss_value, val_acc)

        if val_acc is None:
            best, history.best_epoch = None, epoch
        elif history.best_val_acc is None or val_acc > history.best_val_acc:
            best, history.best_epoch, history.best_val_acc = params.copy(), epoch, val_acc

    history.seconds = time.perf_counter() - started
    log.info(
        "trained %s for %d epochs in %.1fs (best epoch %d, val %s)",
        dataset.name,
        cfg.epochs,
        history.seconds,
        history.best_epoch,
        history.best_val_acc,
    )
    return (best if best is not None else params), history

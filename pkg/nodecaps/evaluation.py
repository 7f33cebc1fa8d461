"""Accuracy, run protocols, sweeps and the over-smoothing diagnostic."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .capsules import CapsuleTensor, Filter, ModelParams, baseline_mean_aggregate, forward, predict, resolve_filter
from .config import WORKERS, TrainConfig
from .data_io import SplitSpec, generate_split
from .errors import ValidationError
from .filter_cache import FilterCache, build_filter
from .filters import HopPowerSet, filter_stats
from .graph import GraphDataset, normalize_adjacency
from .filenames import history_file_name, value_slug
from .training import prepare_features, train, write_history

__all__ = [
    "accuracy",
    "evaluate",
    "RunResult",
    "RunReport",
    "run_protocol",
    "receptive_field_sweep",
    "parameter_sweep",
    "filter_summary",
    "mixing_metric",
    "node_embeddings",
    "baseline_mixing_curve",
]

log = logging.getLogger(__name__)

MIXING_CAP = 1e9


def accuracy(predictions, labels, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValidationError("accuracy needs at least one masked node")
    return float(np.mean(np.asarray(predictions)[mask] == np.asarray(labels)[mask]))


def evaluate(
    params: ModelParams,
    dataset: GraphDataset,
    mask,
    cfg: TrainConfig,
    *,
    filter: Filter | None = None,
) -> float:
    """Fraction of masked nodes whose longest class capsule is the label."""
    if not np.asarray(mask, dtype=bool).any():
        raise ValidationError("evaluate needs at least one masked node")
    if filter is None:
        filter = build_filter(dataset.adjacency, cfg.filter)
    caps, _ = forward(prepare_features(dataset, cfg), filter, params, cfg.routing_iters)
    return accuracy(predict(caps), dataset.labels, mask)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunResult:
    split_seed: int
    seed: int
    test_acc: float
    val_acc: float | None
    best_epoch: int
    seconds: float
    history: str | None = None


@dataclass
class RunReport:
    dataset: str
    config: dict[str, Any]
    runs: list[RunResult] = field(default_factory=list)
    wall_seconds: float = 0.0
    filter_stats: dict[str, Any] = field(default_factory=dict)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.test_acc for r in self.runs])

    @property
    def mean(self) -> float:
        return float(self.accuracies.mean()) if self.runs else float("nan")

    @property
    def std(self) -> float:
        return float(self.accuracies.std()) if self.runs else float("nan")

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "config": self.config,
            "runs": [asdict(r) for r in self.runs],
            "mean": self.mean,
            "std": self.std,
            "wall_seconds": self.wall_seconds,
            "filter_stats": self.filter_stats,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunReport:
        return cls(
            dataset=data["dataset"],
            config=data["config"],
            runs=[RunResult(**r) for r in data["runs"]],
            wall_seconds=data.get("wall_seconds", 0.0),
            filter_stats=data.get("filter_stats", {}),
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def filter_summary(filter: Filter) -> dict[str, Any]:
    """Sparsity of every hop matrix and of the combined filter."""
    if isinstance(filter, HopPowerSet):
        per_hop = {str(h): filter_stats(m) for h, m in zip(filter.hops, filter.matrices)}
        return {"hops": per_hop, "combined": filter_stats(resolve_filter(filter))}
    return {"combined": filter_stats(filter)}


def _run_one(
    dataset: GraphDataset, cfg: TrainConfig, filter: Filter, history_dir: Path | None = None
) -> RunResult:
    spec = SplitSpec(cfg.per_class_train, cfg.val_size, cfg.split_seed)
    dataset = dataset.with_splits(generate_split(dataset, spec))
    params, history = train(dataset, cfg, filter=filter)
    test_acc = evaluate(params, dataset, dataset.mask("test"), cfg, filter=filter)
    log.info("%s split %d seed %d: test %.4f", dataset.name, cfg.split_seed, cfg.seed, test_acc)
    history_path = None
    if history_dir is not None:
        history_path = history_dir / history_file_name(cfg.split_seed, cfg.seed)
        write_history(history, history_path)
    return RunResult(
        cfg.split_seed,
        cfg.seed,
        test_acc,
        history.best_val_acc,
        history.best_epoch,
        history.seconds,
        history=str(history_path) if history_path else None,
    )


def run_protocol(
    dataset: GraphDataset,
    cfg: TrainConfig,
    split_seeds: Sequence[int] = (0,),
    seeds: Sequence[int] = (0,),
    *,
    workers: int | None = None,
    cache: FilterCache | None = None,
    history_dir: str | Path | None = None,
) -> RunReport:
    """Train one model per (split seed, weight seed) pair and collect test accuracy.

    With ``history_dir`` every run's per-epoch history is written there and
    its path is kept on the run's result.
    """
    started = time.perf_counter()
    filter = build_filter(dataset.adjacency, cfg.filter, cache)
    jobs = [cfg.replace(split_seed=s, seed=w) for s in split_seeds for w in seeds]
    workers = WORKERS if workers is None else workers
    if history_dir is not None:
        history_dir = Path(history_dir)
        history_dir.mkdir(parents=True, exist_ok=True)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, dataset, job, filter, history_dir) for job in jobs]
            runs = [f.result() for f in futures]
    else:
        runs = [_run_one(dataset, job, filter, history_dir) for job in jobs]

    return RunReport(
        dataset=dataset.name,
        config=cfg.to_dict(),
        runs=runs,
        wall_seconds=time.perf_counter() - started,
        filter_stats=filter_summary(filter),
    )


def parameter_sweep(
    dataset: GraphDataset,
    base_cfg: TrainConfig,
    param: str,
    values: Iterable[Any],
    split_seeds: Sequence[int] = (0,),
    seeds: Sequence[int] = (0,),
    *,
    workers: int | None = None,
    cache: FilterCache | None = None,
    history_dir: str | Path | None = None,
) -> list[RunReport]:
    """One report per value of ``param`` (a TrainConfig field or alias).

    Histories for each value go to ``history_dir/<value>/`` when given.
    """
    reports = []
    for value in values:
        cfg = base_cfg.replace(**{param: value})
        log.info("sweep %s=%s", param, value)
        value_dir = Path(history_dir) / value_slug(value) if history_dir is not None else None
        reports.append(
            run_protocol(
                dataset, cfg, split_seeds, seeds, workers=workers, cache=cache, history_dir=value_dir
            )
        )
    return reports


def receptive_field_sweep(
    dataset: GraphDataset,
    base_cfg: TrainConfig,
    hops: Sequence[int],
    split_seeds: Sequence[int] = (0,),
    seeds: Sequence[int] = (0,),
    *,
    workers: int | None = None,
    cache: FilterCache | None = None,
    history_dir: str | Path | None = None,
) -> list[RunReport]:
    """Attention filters with M = {1..hop} for every hop in ``hops``."""
    if not hops:
        raise ValidationError("receptive field sweep needs at least one hop value")
    base_cfg = base_cfg.replace(mode="attention")
    return parameter_sweep(
        dataset, base_cfg, "max_hop", hops, split_seeds, seeds,
        workers=workers, cache=cache, history_dir=history_dir,
    )


# ---------------------------------------------------------------------------
# Over-smoothing
# ---------------------------------------------------------------------------


def node_embeddings(class_caps: CapsuleTensor, kind: str = "argmax") -> np.ndarray:
    """Per-node vector: the longest class capsule, or all capsule lengths."""
    if kind == "argmax":
        winners = predict(class_caps)
        return class_caps.data[np.arange(class_caps.n_nodes), winners]
    if kind == "lengths":
        return class_caps.lengths()
    raise ValidationError(f"embedding kind must be argmax or lengths, got {kind!r}")


def mixing_metric(embeddings: np.ndarray, labels) -> float:
    """Mean inter-class distance over mean intra-class distance.

    All-equal embeddings give 1.0; zero intra-class spread with separated
    classes gives MIXING_CAP. Classes with a single node are skipped.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if embeddings.ndim == 1:
        embeddings = embeddings[:, None]

    classes, counts = np.unique(labels, return_counts=True)
    singletons = classes[counts < 2]
    if len(singletons):
        log.warning("mixing metric skips single-node classes %s", singletons.tolist())
    keep = ~np.isin(labels, singletons)
    embeddings, labels = embeddings[keep], labels[keep]
    if len(np.unique(labels)) < 2:
        raise ValidationError("mixing metric needs at least two classes with two or more nodes")

    distances = pdist(embeddings)
    i, j = np.triu_indices(len(labels), k=1)
    same = labels[i] == labels[j]
    intra, inter = distances[same].mean(), distances[~same].mean()
    if intra == 0:
        return 1.0 if inter == 0 else MIXING_CAP
    return float(min(inter / intra, MIXING_CAP))


def baseline_mixing_curve(
    dataset: GraphDataset, depths: Sequence[int], *, seed: int = 0, width: int | None = None
) -> dict[int, float]:
    """mixing_metric of untrained mean-aggregation embeddings at each depth."""
    a_tilde = normalize_adjacency(dataset.adjacency)
    return {
        depth: mixing_metric(
            baseline_mean_aggregate(dataset.features, a_tilde, depth, width=width, seed=seed),
            dataset.labels,
        )
        for depth in depths
    }

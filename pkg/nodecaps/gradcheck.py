"""Finite-difference check of the taped gradients of the whole model.

Builds a small random instance, differentiates the margin loss of a full
forward pass with :func:`nodecaps.autodiff.backward`, and compares every
parameter tensor against central differences.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .capsules import PARAM_NAMES, Filter, ModelParams, forward, taped_forward
from .config import FilterSpec, TrainConfig
from .errors import ValidationError
from .filters import DiffusionFilterParams, SparsifyRule, build_ppr_filter, hop_power_set
from .graph import SparseMatrix, normalize_adjacency
from .training import margin_loss

__all__ = ["GradcheckInstance", "GradcheckRow", "make_instance", "run_gradcheck", "corrupted_adjoint"]

log = logging.getLogger(__name__)

TOLERANCE = 1e-4
DELTA = 1e-5

SIZES = {
    "tiny": {"n_nodes": 12, "n_features": 6, "K": 3, "C": 2, "f_p": 5, "f_c": 4, "T": 2},
    "small": {"n_nodes": 24, "n_features": 8, "K": 4, "C": 3, "f_p": 6, "f_c": 4, "T": 3},
}


@dataclass(frozen=True, eq=False)
class GradcheckInstance:
    features: np.ndarray
    filter: Filter
    labels: np.ndarray
    mask: np.ndarray
    params: ModelParams
    cfg: TrainConfig


@dataclass(frozen=True)
class GradcheckRow:
    name: str
    max_rel_error: float
    status: str  # "ok", "FAIL" or "unused"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def _random_graph(n: int, rng: np.random.Generator, p: float = 0.3) -> SparseMatrix:
    upper = np.triu(rng.random((n, n)) < p, k=1)
    # chain edges keep the graph connected
    upper[np.arange(n - 1), np.arange(1, n)] = True
    dense = (upper | upper.T).astype(np.float64)
    return SparseMatrix.from_dense(dense)


def make_instance(size: str = "tiny", mode: str = "attention", seed: int = 0) -> GradcheckInstance:
    if size not in SIZES:
        raise ValidationError(f"size must be one of {sorted(SIZES)}, got {size!r}")
    dims = SIZES[size]
    n, C = dims["n_nodes"], dims["C"]
    rng = np.random.default_rng(seed)

    a_tilde = normalize_adjacency(_random_graph(n, rng))
    rule = SparsifyRule.topk(n)
    if mode == "attention":
        filter: Filter = hop_power_set(a_tilde, (1, 2), rule)
        n_hops = 2
    elif mode == "ppr":
        filter = build_ppr_filter(a_tilde, DiffusionFilterParams(0.15, truncation=10), rule)
        n_hops = 1
    else:
        raise ValidationError(f"mode must be attention or ppr, got {mode!r}")

    cfg = TrainConfig(
        primary_dim=dims["f_p"],
        class_dim=dims["f_c"],
        n_primary_caps=dims["K"],
        routing_iters=dims["T"],
        n_classes=C,
        filter=FilterSpec(mode=mode, max_hop=2, sparsify=f"topk:{n}"),
    )
    params = ModelParams.initialize(
        dims["n_features"],
        C,
        n_primary_caps=dims["K"],
        primary_dim=dims["f_p"],
        class_dim=dims["f_c"],
        n_hops=n_hops,
        seed=seed,
    )
    # move off the all-zero starting point so every term is exercised
    for name in ("primary_bias", "class_bias", "zeta"):
        params.assign(name, 0.3 * rng.standard_normal(params[name].shape))

    features = np.abs(rng.standard_normal((n, dims["n_features"])))
    labels = np.arange(n) % C
    mask = np.ones(n, dtype=bool)
    return GradcheckInstance(features, filter, labels, mask, params, cfg)


def _loss(instance: GradcheckInstance, params: ModelParams) -> float:
    caps, _ = forward(instance.features, instance.filter, params, instance.cfg.routing_iters)
    return margin_loss(caps, instance.labels, instance.mask, instance.cfg)


def analytic_gradients(instance: GradcheckInstance) -> ad.GradientSet:
    tape = ad.Tape()
    leaves = tape.watch(instance.params)
    caps = taped_forward(
        leaves, instance.features, instance.filter, instance.params, instance.cfg.routing_iters
    )
    return ad.backward(tape, margin_loss(caps, instance.labels, instance.mask, instance.cfg))


def numeric_gradient(instance: GradcheckInstance, name: str, delta: float = DELTA) -> np.ndarray:
    base = instance.params[name]
    grad = np.zeros_like(base)
    trial = instance.params.copy()
    for idx in np.ndindex(base.shape):
        shifted = base.copy()
        shifted[idx] = base[idx] + delta
        trial.assign(name, shifted)
        up = _loss(instance, trial)
        shifted[idx] = base[idx] - delta
        trial.assign(name, shifted)
        down = _loss(instance, trial)
        grad[idx] = (up - down) / (2.0 * delta)
    return grad


def run_gradcheck(
    size: str = "tiny",
    mode: str = "attention",
    seed: int = 0,
    tolerance: float = TOLERANCE,
) -> list[GradcheckRow]:
    instance = make_instance(size, mode, seed)
    grads = analytic_gradients(instance)
    rows = []
    for name in PARAM_NAMES:
        numeric = numeric_gradient(instance, name)
        error = relative_error(grads[name], numeric)
        if name not in grads.reached and not np.any(numeric):
            status = "unused"
        else:
            status = "ok" if error < tolerance else "FAIL"
        log.debug("gradcheck %s: %.3e (%s)", name, error, status)
        rows.append(GradcheckRow(name, error, status))
    return rows


def passed(rows: list[GradcheckRow]) -> bool:
    return all(row.status != "FAIL" for row in rows)


@contextlib.contextmanager
def corrupted_adjoint(op: str, factor: float = 1.5):
    """Temporarily scale the input gradients of one primitive's adjoint."""
    if op not in ad.ADJOINTS:
        raise ValidationError(f"no adjoint registered for {op!r}; known: {sorted(ad.ADJOINTS)}")
    original = ad.ADJOINTS[op]

    def scaled(*args, **kwargs):
        return tuple(None if g is None else factor * g for g in original(*args, **kwargs))

    ad.ADJOINTS[op] = scaled
    try:
        yield
    finally:
        ad.ADJOINTS[op] = original

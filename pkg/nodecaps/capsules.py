"""Node capsules: primary projection, routing by agreement, prediction.

The forward pass is written once against :mod:`nodecaps.autodiff` so the same
code runs plain (arrays in, arrays out) or recorded on a tape for training.

Shapes used throughout::

    features          n x f
    primary capsules  n x K x f_p
    predictions       n x K x C x f_c      (W_kl h_j^(k))
    couplings/logits  n x K x C
    class capsules    n x C x f_c
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, ValidationError
from .filters import HopPowerSet, attention_weights, weighted_sum
from .graph import SparseMatrix, spmm

__all__ = [
    "CapsuleTensor",
    "ModelParams",
    "RoutingState",
    "primary_capsules",
    "routing_forward",
    "forward",
    "taped_forward",
    "squash",
    "predict",
    "dropout_mask",
    "resolve_filter",
    "baseline_mean_aggregate",
]

log = logging.getLogger(__name__)

Filter = SparseMatrix | HopPowerSet
Observer = Callable[[int, np.ndarray, np.ndarray], None]

PARAM_NAMES = ("primary_weights", "primary_bias", "routing_weights", "class_bias", "zeta")
WEIGHT_NAMES = ("primary_weights", "routing_weights")


@dataclass(frozen=True, eq=False)
class CapsuleTensor:
    """Dense ``n_nodes x n_caps x dim`` block of capsule vectors."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeError(f"capsule tensor must be rank 3, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("capsule tensor has non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def n_nodes(self) -> int:
        return self.data.shape[0]

    @property
    def n_caps(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def lengths(self) -> np.ndarray:
        return np.linalg.norm(self.data, axis=-1)


@dataclass(frozen=True, eq=False)
class RoutingState:
    logits: np.ndarray
    couplings: np.ndarray


class ModelParams:
    """All learnable arrays plus one gradient slot per array.

    ``generation`` increases on every write so a recorded tape can tell when
    the values it saw are gone.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        missing = set(PARAM_NAMES) - set(arrays)
        if missing:
            raise ValidationError(f"missing parameter arrays: {sorted(missing)}")
        self._arrays = {name: np.array(arrays[name], dtype=np.float64) for name in PARAM_NAMES}
        self.grads = {name: np.zeros_like(a) for name, a in self._arrays.items()}
        self.generation = 0
        self._check_shapes()

    def _check_shapes(self):
        pw, pb = self._arrays["primary_weights"], self._arrays["primary_bias"]
        rw, cb = self._arrays["routing_weights"], self._arrays["class_bias"]
        if pw.ndim != 3 or pb.shape != pw.shape[:2]:
            raise ShapeError(f"primary weights {pw.shape} and bias {pb.shape} disagree")
        if rw.ndim != 4 or rw.shape[0] != pw.shape[0] or rw.shape[3] != pw.shape[1]:
            raise ShapeError(f"routing weights {rw.shape} do not match primary weights {pw.shape}")
        if cb.shape != rw.shape[1:3]:
            raise ShapeError(f"class bias {cb.shape} does not match routing weights {rw.shape}")
        if self._arrays["zeta"].ndim != 1:
            raise ShapeError("zeta must be a vector")

    @classmethod
    def initialize(
        cls,
        n_features: int,
        n_classes: int,
        *,
        n_primary_caps: int,
        primary_dim: int,
        class_dim: int,
        n_hops: int = 1,
        seed: int = 0,
    ) -> ModelParams:
        """Glorot-uniform weights, zero biases and zero hop logits."""
        rng = np.random.default_rng(seed)

        def glorot(shape, fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=shape)

        k, f_p, f_c = n_primary_caps, primary_dim, class_dim
        return cls(
            {
                "primary_weights": glorot((k, f_p, n_features), n_features, f_p),
                "primary_bias": np.zeros((k, f_p)),
                "routing_weights": glorot((k, n_classes, f_c, f_p), f_p, f_c),
                "class_bias": np.zeros((n_classes, f_c)),
                "zeta": np.zeros(n_hops),
            }
        )

    @property
    def n_primary_caps(self) -> int:
        return self._arrays["primary_weights"].shape[0]

    @property
    def n_classes(self) -> int:
        return self._arrays["class_bias"].shape[0]

    @property
    def n_features(self) -> int:
        return self._arrays["primary_weights"].shape[2]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(self._arrays)

    def assign(self, name: str, value: np.ndarray) -> None:
        if name not in self._arrays:
            raise KeyError(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._arrays[name].shape:
            raise ShapeError(f"{name}: expected shape {self._arrays[name].shape}, got {value.shape}")
        self._arrays[name] = value.copy()
        self.generation += 1

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> ModelParams:
        return ModelParams(self._arrays)

    def hop_attention(self) -> np.ndarray:
        return attention_weights(self._arrays["zeta"])


def dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], p: float) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``p``, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"drop probability must lie in [0, 1), got {p}")
    return (rng.random(shape) >= p) / (1.0 - p)


def resolve_filter(filter: Filter, zeta=None) -> SparseMatrix:
    """The concrete filter matrix; hop powers are combined with softmax(zeta)."""
    if isinstance(filter, SparseMatrix):
        return filter
    if zeta is None:
        zeta = np.zeros(len(filter.hops))
    if len(zeta) != len(filter.hops):
        raise ShapeError(f"zeta has {len(zeta)} entries but the hop set has {len(filter.hops)}")
    if len(filter.hops) == 1:
        return filter.matrices[0]
    return weighted_sum(filter.matrices, attention_weights(zeta))


# ---------------------------------------------------------------------------
# Forward pieces (plain or taped)
# ---------------------------------------------------------------------------


def _primary(x, weights, bias, mask):
    pre = ad.add(ad.matmul("nf,kpf->nkp", x, weights), bias)
    act = ad.relu(pre)
    if mask is not None:
        act = ad.mul(act, mask)
    return ad.normalize(act, axis=-1)


def _aggregator(filter: Filter, zeta):
    if isinstance(filter, SparseMatrix):
        return lambda x: ad.spmm(filter, x)
    matrices = filter.matrices
    if len(ad.value_of(zeta)) != len(matrices):
        raise ShapeError(
            f"zeta has {len(ad.value_of(zeta))} entries but the hop set has {len(matrices)}"
        )
    xi = ad.softmax(zeta, axis=0)
    return lambda x: ad.weighted_spmm(matrices, xi, x)


def _route(h, filter: Filter, routing_weights, class_bias, zeta, iterations: int, observer):
    u_hat = ad.matmul("nkp,kldp->nkld", h, routing_weights)
    n, k, c = np.shape(ad.value_of(u_hat))[:3]
    aggregate = _aggregator(filter, zeta)

    logits = np.zeros((n, k, c))
    for t in range(iterations + 1):
        couplings = ad.softmax(logits, axis=1)
        predictions = ad.matmul("nkl,nkld->nld", couplings, u_hat)
        v = ad.squash(ad.add(aggregate(predictions), class_bias), axis=-1)
        if observer is not None:
            observer(t, np.array(ad.value_of(couplings)), np.array(ad.value_of(v)))
        if t < iterations:
            logits = ad.add(logits, ad.matmul("nld,nkld->nkl", v, u_hat))
    return v, logits, couplings


def _check_inputs(features: np.ndarray, filter: Filter, params: ModelParams):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.n_features:
        raise ShapeError(
            f"features must be n x {params.n_features}, got {features.shape}"
        )
    if not np.all(np.isfinite(features)):
        raise ValidationError("features contain NaN or infinite values")
    n_filter = filter.n_rows if isinstance(filter, SparseMatrix) else filter.n_nodes
    if n_filter != features.shape[0]:
        raise ShapeError(f"filter covers {n_filter} nodes but there are {features.shape[0]}")
    return features


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def primary_capsules(
    features: np.ndarray, params: ModelParams, dropout_mask: np.ndarray | None = None
) -> CapsuleTensor:
    """K unit-norm capsules per node: normalize(ReLU(W x + b)), zero stays zero."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.n_features:
        raise ShapeError(f"features must be n x {params.n_features}, got {features.shape}")
    if not np.all(np.isfinite(features)):
        raise ValidationError("features contain NaN or infinite values")
    h = _primary(features, params["primary_weights"], params["primary_bias"], dropout_mask)
    return CapsuleTensor(h)


def routing_forward(
    primaries: CapsuleTensor,
    filter: Filter,
    params: ModelParams,
    T: int,
    observer: Observer | None = None,
) -> tuple[CapsuleTensor, RoutingState]:
    """Run T+1 coupling refinements and return the final class capsules.

    ``observer(t, couplings, class_caps)`` is called after every pass.
    """
    if int(T) != T or T < 1:
        raise ValidationError(f"routing needs at least one iteration, got T={T}")
    n_filter = filter.n_rows if isinstance(filter, SparseMatrix) else filter.n_nodes
    if n_filter != primaries.n_nodes:
        raise ShapeError(f"filter covers {n_filter} nodes but there are {primaries.n_nodes} capsules")
    if primaries.n_caps != params.n_primary_caps:
        raise ShapeError(
            f"expected {params.n_primary_caps} primary capsules per node, got {primaries.n_caps}"
        )
    v, logits, couplings = _route(
        primaries.data,
        filter,
        params["routing_weights"],
        params["class_bias"],
        params["zeta"],
        int(T),
        observer,
    )
    return CapsuleTensor(v), RoutingState(np.asarray(logits), np.asarray(couplings))


def forward(
    features: np.ndarray,
    filter: Filter,
    params: ModelParams,
    T: int,
    *,
    dropout_mask: np.ndarray | None = None,
    observer: Observer | None = None,
) -> tuple[CapsuleTensor, RoutingState]:
    return routing_forward(
        primary_capsules(features, params, dropout_mask), filter, params, T, observer
    )


def taped_forward(
    leaves: Mapping[str, ad.Variable],
    features: np.ndarray,
    filter: Filter,
    params: ModelParams,
    T: int,
    *,
    dropout_mask: np.ndarray | None = None,
    observer: Observer | None = None,
):
    """Forward pass on a tape; ``leaves`` come from ``Tape.watch(params)``."""
    features = _check_inputs(features, filter, params)
    if int(T) != T or T < 1:
        raise ValidationError(f"routing needs at least one iteration, got T={T}")
    h = _primary(features, leaves["primary_weights"], leaves["primary_bias"], dropout_mask)
    v, _, _ = _route(
        h,
        filter,
        leaves["routing_weights"],
        leaves["class_bias"],
        leaves["zeta"],
        int(T),
        observer,
    )
    return v


def squash(u: np.ndarray, axis: int = -1) -> np.ndarray:
    return ad.squash(np.asarray(u, dtype=np.float64), axis=axis)


def predict(class_caps: CapsuleTensor | np.ndarray) -> np.ndarray:
    """Longest class capsule per node; ties go to the lowest class id."""
    data = class_caps.data if isinstance(class_caps, CapsuleTensor) else np.asarray(class_caps)
    return np.argmax(np.linalg.norm(data, axis=-1), axis=1)


def baseline_mean_aggregate(
    features: np.ndarray,
    filter: SparseMatrix,
    layers: int,
    weights: np.ndarray | Sequence[np.ndarray] | None = None,
    *,
    width: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Untrained message passing: repeat ReLU((filter @ H) @ W) ``layers`` times.

    ``weights`` is one matrix reused on every layer or one per layer; by
    default each layer draws a fresh Glorot-uniform matrix from ``seed``.
    """
    if int(layers) != layers or layers < 1:
        raise ValidationError(f"layers must be a positive integer, got {layers}")
    h = np.asarray(features, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != filter.n_cols:
        raise ShapeError(f"features {h.shape} do not match filter {filter.shape}")

    if weights is None:
        rng = np.random.default_rng(seed)
        width = width or h.shape[1]
        per_layer = []
        fan_in = h.shape[1]
        for _ in range(layers):
            limit = np.sqrt(6.0 / (fan_in + width))
            per_layer.append(rng.uniform(-limit, limit, size=(fan_in, width)))
            fan_in = width
    elif isinstance(weights, np.ndarray) and weights.ndim == 2:
        per_layer = [weights] * layers
    else:
        per_layer = [np.asarray(w, dtype=np.float64) for w in weights]
        if len(per_layer) != layers:
            raise ShapeError(f"{layers} layers but {len(per_layer)} weight matrices")

    for w in per_layer:
        if w.shape[0] != h.shape[1]:
            raise ShapeError(f"weight {w.shape} does not fit hidden width {h.shape[1]}")
        h = np.maximum(spmm(filter, h) @ w, 0.0)
    return h

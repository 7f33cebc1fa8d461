"""Multi-hop graph filters: attention over hop powers and PPR diffusion.

A filter is a sparse matrix whose row ``i`` lists the subgraph node ``i``
aggregates from, with weights. Two families are built here:

* attention filters, ``sum_i xi_i * Ã^i`` over a hop set with ``xi = softmax(zeta)``
  learned during training; the hop matrices are prepared once and combined
  on every forward pass;
* personalized PageRank filters, either exact (dense solve) or truncated,
  fixed for the whole run.

Every hop matrix is pruned (epsilon-threshold or top-k per row) and then
symmetrically renormalized. The diagonal is never pruned.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .config import DENSE_PPR_CAP
from .errors import ShapeError, StructureError, ValidationError
from .graph import SparseMatrix, symmetric_renormalize

__all__ = [
    "SparsifyRule",
    "HopPowerSet",
    "AttentionFilterParams",
    "DiffusionFilterParams",
    "matrix_power_sparsified",
    "hop_power_set",
    "attention_weights",
    "weighted_sum",
    "build_attention_filter",
    "ppr_matrix",
    "build_ppr_filter",
    "ppr_hop_weights",
    "adjacency_poly_to_laplacian_poly",
    "neighborhood_of",
    "filter_stats",
]

log = logging.getLogger(__name__)

DEFAULT_TOP_K = 128


@dataclass(frozen=True)
class SparsifyRule:
    """Per-row pruning rule: ``epsilon`` threshold or ``topk`` largest entries."""

    kind: str
    epsilon: float = 0.0
    k: int = DEFAULT_TOP_K

    def __post_init__(self):
        if self.kind == "epsilon":
            if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
                raise ValidationError(f"epsilon must be a finite non-negative number, got {self.epsilon}")
        elif self.kind == "topk":
            if int(self.k) != self.k or self.k < 1:
                raise ValidationError(f"top-k needs a positive integer k, got {self.k}")
        else:
            raise ValidationError(f"unknown sparsify rule {self.kind!r}; expected epsilon or topk")

    @classmethod
    def topk(cls, k: int) -> SparsifyRule:
        return cls("topk", k=k)

    @classmethod
    def threshold(cls, epsilon: float) -> SparsifyRule:
        return cls("epsilon", epsilon=epsilon)

    @classmethod
    def parse(cls, text: str) -> SparsifyRule:
        """Parse the ``topk:K`` / ``eps:E`` flag syntax."""
        kind, sep, value = text.strip().partition(":")
        if not sep:
            raise ValidationError(f"sparsify rule must look like topk:K or eps:E, got {text!r}")
        try:
            if kind == "topk":
                return cls.topk(int(value))
            if kind in ("eps", "epsilon"):
                return cls.threshold(float(value))
        except ValueError as exc:
            raise ValidationError(f"bad sparsify value in {text!r}") from exc
        raise ValidationError(f"unknown sparsify rule {kind!r} in {text!r}")

    def __str__(self) -> str:
        return f"topk:{self.k}" if self.kind == "topk" else f"eps:{self.epsilon!r}"


@dataclass(frozen=True, eq=False)
class HopPowerSet:
    """Sparsified, renormalized powers of Ã for every hop in the set M."""

    hops: tuple[int, ...]
    matrices: tuple[SparseMatrix, ...]

    def __post_init__(self):
        if not self.hops:
            raise ValidationError("hop set must not be empty")
        if list(self.hops) != sorted(set(self.hops)) or self.hops[0] < 1:
            raise ValidationError(f"hops must be sorted distinct positive integers, got {self.hops}")
        if len(self.matrices) != len(self.hops):
            raise ShapeError(f"{len(self.hops)} hops but {len(self.matrices)} matrices")
        n = self.matrices[0].n_rows
        for hop, m in zip(self.hops, self.matrices):
            if m.shape != (n, n):
                raise ShapeError(f"hop {hop} matrix is {m.shape}, expected {(n, n)}")

    @property
    def n_nodes(self) -> int:
        return self.matrices[0].n_rows

    def __getitem__(self, hop: int) -> SparseMatrix:
        try:
            return self.matrices[self.hops.index(hop)]
        except ValueError:
            raise KeyError(hop) from None


@dataclass(frozen=True)
class AttentionFilterParams:
    zeta: tuple[float, ...]

    def __post_init__(self):
        if not all(math.isfinite(z) for z in self.zeta):
            raise ValidationError("zeta must be finite")


@dataclass(frozen=True)
class DiffusionFilterParams:
    alpha: float
    truncation: int | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"teleport probability must lie in (0, 1), got {self.alpha}")
        if self.truncation is not None and self.truncation < 0:
            raise ValidationError(f"truncation must be non-negative, got {self.truncation}")


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------


def _keep_mask(matrix: sp.csr_matrix, rule: SparsifyRule) -> np.ndarray:
    """Boolean mask over ``matrix.data`` of entries that survive ``rule``."""
    n = matrix.shape[0]
    rows = np.repeat(np.arange(n), np.diff(matrix.indptr))
    diagonal = rows == matrix.indices

    if rule.kind == "epsilon":
        return (matrix.data >= rule.epsilon) | diagonal

    keep = diagonal.copy()
    for i in range(n):
        start, stop = matrix.indptr[i], matrix.indptr[i + 1]
        if stop - start <= rule.k:
            keep[start:stop] = True
            continue
        values = matrix.data[start:stop]
        others = np.flatnonzero(~diagonal[start:stop])
        budget = rule.k - int(diagonal[start:stop].any())
        # stable sort keeps the lower column first among equal weights
        order = others[np.argsort(-values[others], kind="stable")][:budget]
        keep[start + order] = True
    return keep


def _prune(matrix: sp.csr_matrix, rule: SparsifyRule, symmetrize: str = "both") -> sp.csr_matrix:
    matrix = matrix.tocsr()
    matrix.sort_indices()
    keep = _keep_mask(matrix, rule)
    mask = sp.csr_matrix((keep.astype(np.float64), matrix.indices, matrix.indptr), shape=matrix.shape)
    mask.eliminate_zeros()
    if symmetrize == "both":
        mask = mask.multiply(mask.T)
    elif symmetrize == "either":
        mask = mask.maximum(mask.T)
    else:
        raise ValidationError(f"symmetrize must be 'both' or 'either', got {symmetrize!r}")
    pruned = matrix.multiply(mask.astype(bool)).tocsr()
    pruned.eliminate_zeros()
    pruned.sort_indices()
    return pruned


def _symmetrized(matrix: sp.csr_matrix) -> sp.csr_matrix:
    return ((matrix + matrix.T) * 0.5).tocsr()


def _prune_and_renormalize(
    matrix: sp.csr_matrix, rule: SparsifyRule, symmetrize: str = "both"
) -> SparseMatrix:
    pruned = _prune(_symmetrized(matrix), rule, symmetrize)
    if np.any(pruned.diagonal() <= 0):
        raise StructureError("pruned filter lost a diagonal entry")
    return SparseMatrix.from_scipy(symmetric_renormalize(pruned))


def matrix_power_sparsified(
    a_tilde: SparseMatrix, hop: int, rule: SparsifyRule, symmetrize: str = "both"
) -> SparseMatrix:
    """Compute Ã^hop, prune it by ``rule``, and renormalize symmetrically.

    ``symmetrize='both'`` keeps an entry only if it survives in (i, j) and (j, i),
    which preserves the top-k row bound; ``'either'`` keeps the union.
    """
    if int(hop) != hop or hop < 1:
        raise ValidationError(f"hop must be a positive integer, got {hop}")
    base = a_tilde.to_scipy()
    power = base
    for _ in range(hop - 1):
        power = (power @ base).tocsr()
    return _prune_and_renormalize(power, rule, symmetrize)


def hop_power_set(
    a_tilde: SparseMatrix,
    hops,
    rule: SparsifyRule,
    *,
    final_rule: SparsifyRule | None = None,
    symmetrize: str = "both",
) -> HopPowerSet:
    """Build the per-hop matrices for an attention filter.

    With ``final_rule`` the pruning pattern is chosen once on the combined
    uniform-weight filter and every hop matrix is restricted to it, so the
    learned weights still enter linearly.
    """
    hops = tuple(sorted(set(int(h) for h in hops)))
    if not hops or hops[0] < 1:
        raise ValidationError(f"hops must be positive integers, got {hops}")

    base = a_tilde.to_scipy()
    raw: dict[int, sp.csr_matrix] = {}
    power = base
    for hop in range(1, hops[-1] + 1):
        if hop > 1:
            power = (power @ base).tocsr()
        if hop in hops:
            raw[hop] = _symmetrized(power)

    if final_rule is None:
        matrices = tuple(_prune_and_renormalize(raw[h], rule, symmetrize) for h in hops)
    else:
        combined = raw[hops[0]].copy()
        for h in hops[1:]:
            combined = combined + raw[h]
        pattern = _prune((combined / len(hops)).tocsr(), final_rule, symmetrize).astype(bool)
        matrices = tuple(
            SparseMatrix.from_scipy(symmetric_renormalize(raw[h].multiply(pattern).tocsr()))
            for h in hops
        )
    log.debug("built hop powers %s (nnz %s)", hops, [m.nnz for m in matrices])
    return HopPowerSet(hops, matrices)


# ---------------------------------------------------------------------------
# Attention filter
# ---------------------------------------------------------------------------


def attention_weights(zeta) -> np.ndarray:
    """Softmax over hop logits."""
    zeta = np.asarray(zeta, dtype=np.float64)
    shifted = np.exp(zeta - zeta.max())
    return shifted / shifted.sum()


def weighted_sum(matrices, weights) -> SparseMatrix:
    """Σ w_i M_i, accumulated in list order; the pattern is the union of patterns."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(matrices) != len(weights):
        raise ShapeError(f"{len(matrices)} matrices but {len(weights)} weights")
    total = None
    for m, w in zip(matrices, weights):
        term = m.to_scipy() * w
        total = term if total is None else total + term
    return SparseMatrix.from_scipy(total)


def build_attention_filter(powers: HopPowerSet, params: AttentionFilterParams) -> SparseMatrix:
    if len(params.zeta) != len(powers.hops):
        raise ShapeError(
            f"zeta has {len(params.zeta)} entries but the hop set has {len(powers.hops)}"
        )
    if len(powers.hops) == 1:
        return powers.matrices[0]
    return weighted_sum(powers.matrices, attention_weights(params.zeta))


# ---------------------------------------------------------------------------
# Diffusion filter
# ---------------------------------------------------------------------------


def ppr_hop_weights(alpha: float, n_terms: int) -> np.ndarray:
    """Series weights α(1-α)^i for i = 0..n_terms-1."""
    return alpha * (1.0 - alpha) ** np.arange(n_terms)


def ppr_matrix(a_tilde: SparseMatrix, params: DiffusionFilterParams) -> sp.csr_matrix:
    """Unpruned PPR matrix: exact inverse, or the truncated series up to P."""
    n = a_tilde.n_rows
    alpha = params.alpha
    if params.truncation is None:
        if n > DENSE_PPR_CAP:
            raise ValidationError(
                f"exact PPR is limited to {DENSE_PPR_CAP} nodes (graph has {n}); "
                "pass a truncation instead"
            )
        inner = np.eye(n) - (1.0 - alpha) * a_tilde.to_dense()
        exact = np.linalg.solve(inner, alpha * np.eye(n))
        return sp.csr_matrix(exact)

    if params.truncation == 0:
        log.warning("PPR truncation 0 keeps only the teleport term alpha*I")
    base = a_tilde.to_scipy()
    term = sp.eye(n, format="csr") * alpha
    total = term
    for _ in range(params.truncation):
        term = ((term @ base) * (1.0 - alpha)).tocsr()
        total = total + term
    return total.tocsr()


def build_ppr_filter(
    a_tilde: SparseMatrix,
    params: DiffusionFilterParams,
    rule: SparsifyRule,
    symmetrize: str = "both",
) -> SparseMatrix:
    return _prune_and_renormalize(ppr_matrix(a_tilde, params), rule, symmetrize)


# ---------------------------------------------------------------------------
# Spectral view and inspection
# ---------------------------------------------------------------------------


def adjacency_poly_to_laplacian_poly(xi) -> list[float]:
    """Convert Σ ξ_i Ã^i into Σ θ_j L^j with L = I - Ã.

    Expanding Ã^i = (I - L)^i binomially gives
    θ_j = (-1)^j Σ_{i>=j} C(i, j) ξ_i.
    """
    xi = [float(x) for x in xi]
    if not xi:
        raise ValidationError("need at least one coefficient")
    if not all(math.isfinite(x) for x in xi):
        raise ValidationError("coefficients must be finite")
    top = len(xi) - 1
    return [
        (-1) ** j * math.fsum(math.comb(i, j) * xi[i] for i in range(j, top + 1))
        for j in range(top + 1)
    ]


def neighborhood_of(filter: SparseMatrix, node: int) -> list[tuple[int, float]]:
    if not 0 <= node < filter.n_rows:
        raise ValidationError(f"node {node} out of range for {filter.n_rows} nodes")
    cols, vals = filter.row(node)
    return [(int(j), float(w)) for j, w in zip(cols, vals) if w != 0]


def filter_stats(filter: SparseMatrix) -> dict[str, float]:
    per_row = filter.row_nnz()
    return {
        "n_nodes": int(filter.n_rows),
        "nnz": int(filter.nnz),
        "mean_row_nnz": float(per_row.mean()) if len(per_row) else 0.0,
        "max_row_nnz": int(per_row.max()) if len(per_row) else 0,
        "min_row_nnz": int(per_row.min()) if len(per_row) else 0,
    }

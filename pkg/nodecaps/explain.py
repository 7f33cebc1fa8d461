"""Interpretability exports: hop attention, coupling summaries, neighborhoods."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .capsules import CapsuleTensor, Filter, ModelParams, RoutingState, resolve_filter
from .config import FilterSpec
from .errors import ShapeError, ValidationError
from .evaluation import node_embeddings
from .filenames import COUPLING_CSV_FILE, EMBEDDINGS_FILE, EXPLANATION_FILE
from .filters import neighborhood_of, ppr_hop_weights

__all__ = [
    "ExplanationBundle",
    "export_explanations",
    "write_explanations",
    "write_coupling_csv",
    "write_embeddings",
]

log = logging.getLogger(__name__)

# hop weights listed for the exact PPR filter, which has no truncation
EXACT_PPR_TERMS = 10
# label of the PPR mass beyond the listed hops
PPR_REST = "rest"


@dataclass
class ExplanationBundle:
    hop_attention: list[tuple[int | str, float]]
    coupling_summary: np.ndarray  # C x K, filter-weighted
    coupling_summary_unweighted: np.ndarray  # C x K
    neighborhoods: dict[int, list[tuple[int, float]]] = field(default_factory=dict)
    target_class: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "hop_attention": [[h, w] for h, w in self.hop_attention],
            "coupling_summary": self.coupling_summary.tolist(),
            "coupling_summary_unweighted": self.coupling_summary_unweighted.tolist(),
            "neighborhoods": {str(k): [[j, w] for j, w in v] for k, v in self.neighborhoods.items()},
            "target_class": self.target_class,
        }


def _hop_attention(params: ModelParams, spec: FilterSpec) -> list[tuple[int | str, float]]:
    """Weight per hop; PPR lists hops 0..P and then a ``rest`` entry so the total is 1.

    For a truncated filter the rest is the mass the series drops. For the
    exact filter it is spread over walks longer than the listed hops.
    """
    if spec.mode == "attention":
        return [(h, float(w)) for h, w in zip(spec.hops, params.hop_attention())]
    n_terms = (spec.truncation if spec.truncation is not None else EXACT_PPR_TERMS) + 1
    weights: list[tuple[int | str, float]] = [
        (i, float(w)) for i, w in enumerate(ppr_hop_weights(spec.alpha, n_terms))
    ]
    weights.append((PPR_REST, float((1.0 - spec.alpha) ** n_terms)))
    return weights


def export_explanations(
    params: ModelParams,
    state: RoutingState,
    filter: Filter,
    spec: FilterSpec,
    *,
    labels: np.ndarray | None = None,
    target_class: int | None = None,
    nodes: list[int] | None = None,
    top: int = 10,
) -> ExplanationBundle:
    """Summarize what a trained model attends to.

    ``coupling_summary[l, k]`` averages c_jkl over every (target node i,
    neighbor j) pair of the filter, weighted by the filter entry; the
    unweighted variant counts each pair once. Targets are all nodes, or the
    nodes labelled ``target_class``.
    """
    matrix = resolve_filter(filter, params["zeta"])
    couplings = np.asarray(state.couplings)
    n, k, c = couplings.shape
    if matrix.n_rows != n:
        raise ShapeError(f"filter covers {matrix.n_rows} nodes but routing state has {n}")

    targets = np.ones(n, dtype=bool)
    if target_class is not None:
        if labels is None:
            raise ValidationError("target_class needs labels")
        if not 0 <= target_class < c:
            raise ValidationError(f"target_class must lie in [0, {c}), got {target_class}")
        targets = np.asarray(labels) == target_class
        if not targets.any():
            raise ValidationError(f"no nodes are labelled {target_class}")

    rows = matrix.to_scipy()[np.flatnonzero(targets)]
    weights = np.asarray(rows.sum(axis=0)).ravel()
    counts = rows.getnnz(axis=0).astype(np.float64)

    weighted = np.einsum("j,jkl->lk", weights, couplings) / weights.sum()
    unweighted = np.einsum("j,jkl->lk", counts, couplings) / counts.sum()

    if nodes is None:
        nodes = np.flatnonzero(targets)[:top].tolist()
    neighborhoods = {
        int(i): sorted(neighborhood_of(matrix, int(i)), key=lambda p: (-p[1], p[0]))[:top]
        for i in nodes
    }
    return ExplanationBundle(
        hop_attention=_hop_attention(params, spec),
        coupling_summary=weighted,
        coupling_summary_unweighted=unweighted,
        neighborhoods=neighborhoods,
        target_class=target_class,
    )


def write_coupling_csv(bundle: ExplanationBundle, path: str | Path) -> None:
    """Class rows by primary-capsule columns, the heat-map layout."""
    summary = bundle.coupling_summary
    header = "class," + ",".join(f"k{k}" for k in range(summary.shape[1]))
    lines = [header] + [
        f"{l}," + ",".join(repr(float(x)) for x in row) for l, row in enumerate(summary)
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_embeddings(
    class_caps: CapsuleTensor, labels, path: str | Path, kind: str = "argmax"
) -> None:
    """TSV of node_id, label, embedding components."""
    vectors = node_embeddings(class_caps, kind)
    lines = [
        "\t".join([str(i), str(int(label)), *(repr(float(x)) for x in vec)])
        for i, (label, vec) in enumerate(zip(labels, vectors))
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_explanations(
    bundle: ExplanationBundle,
    out_dir: str | Path,
    *,
    class_caps: CapsuleTensor | None = None,
    labels=None,
    embedding_kind: str = "argmax",
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / EXPLANATION_FILE).write_text(
        json.dumps(bundle.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    write_coupling_csv(bundle, out_dir / COUPLING_CSV_FILE)
    if class_caps is not None and labels is not None:
        write_embeddings(class_caps, labels, out_dir / EMBEDDINGS_FILE, embedding_kind)
    log.info("explanations written to %s", out_dir)
    return out_dir

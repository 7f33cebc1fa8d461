"""Stochastic block model graphs with class-dependent Gaussian features."""

from __future__ import annotations

import logging

import networkx as nx
import numpy as np

from .errors import ValidationError
from .graph import GraphDataset, SparseMatrix

log = logging.getLogger(__name__)


def make_sbm(
    n_per_class: int,
    n_classes: int,
    p_in: float,
    p_out: float,
    feature_dim: int,
    signal: float,
    seed: int = 0,
) -> GraphDataset:
    """Planted-partition graph; class c's feature mean is ``signal / sqrt(2) * e_c``.

    Class means are therefore pairwise ``signal`` apart, with unit Gaussian
    noise on every feature. Nodes are numbered class by class.
    """
    if n_per_class < 1 or n_classes < 2:
        raise ValidationError(
            f"need at least one node per class and two classes, got {n_per_class}, {n_classes}"
        )
    if feature_dim < n_classes:
        raise ValidationError(f"feature_dim ({feature_dim}) must be at least n_classes ({n_classes})")
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ValidationError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if signal < 0:
        raise ValidationError(f"signal must be non-negative, got {signal}")

    sizes = [n_per_class] * n_classes
    probs = [[p_in if a == b else p_out for b in range(n_classes)] for a in range(n_classes)]
    graph = nx.stochastic_block_model(sizes, probs, seed=seed)
    n = n_per_class * n_classes
    adjacency = nx.to_scipy_sparse_array(graph, nodelist=range(n), dtype=np.float64, format="csr")

    labels = np.repeat(np.arange(n_classes), n_per_class)
    rng = np.random.default_rng(seed)
    means = np.zeros((n_classes, feature_dim))
    means[np.arange(n_classes), np.arange(n_classes)] = signal / np.sqrt(2.0)
    features = means[labels] + rng.standard_normal((n, feature_dim))

    log.debug("sbm: %d nodes, %d edges", n, graph.number_of_edges())
    return GraphDataset(
        SparseMatrix.from_scipy(adjacency),
        features,
        labels,
        n_classes,
        {},
        name=f"sbm-{n_classes}x{n_per_class}-s{seed}",
    )

"""Pytest configuration for nodecaps tests."""

import logging
import os
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Prevent tests from loading the user's actual env file or writing to ~/.nodecaps
_ROOT = Path(tempfile.mkdtemp(prefix="nodecaps-test-"))
os.environ.setdefault("NODECAPS_CONFIG_DIR", str(_ROOT / "config"))
os.environ.setdefault("NODECAPS_DATA_DIR", str(_ROOT / "datasets"))
os.environ.setdefault("NODECAPS_OUTPUT_DIR", str(_ROOT / "runs"))
os.environ.setdefault("NODECAPS_CACHE_DIR", str(_ROOT / "cache"))
os.environ.setdefault("NODECAPS_LOG_DIR", str(_ROOT / "logs"))

from nodecaps.graph import SparseMatrix  # noqa: E402


def random_adjacency(n: int, density: float, seed: int) -> SparseMatrix:
    """Symmetric 0/1 adjacency with zero diagonal."""
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < density, k=1)
    return SparseMatrix.from_dense((upper | upper.T).astype(float))


@pytest.fixture
def two_node():
    return SparseMatrix.from_dense(np.array([[0.0, 1.0], [1.0, 0.0]]))


@pytest.fixture
def graph8():
    return random_adjacency(8, 0.4, seed=3)


@pytest.fixture
def make_graph():
    return random_adjacency


@pytest.fixture
def tiny_config():
    from nodecaps.config import FilterSpec, TrainConfig

    return TrainConfig(
        primary_dim=4,
        class_dim=3,
        n_primary_caps=3,
        routing_iters=2,
        epochs=4,
        per_class_train=5,
        val_size=6,
        dropout_p=0.3,
        learning_rate=0.01,
        filter=FilterSpec(max_hop=2, sparsify="topk:16"),
    )


@pytest.fixture
def sbm_dataset():
    """Two well separated 15-node communities with train/val/test splits."""
    from nodecaps.data_io import SplitSpec, generate_split
    from nodecaps.synthetic import make_sbm

    dataset = make_sbm(15, 2, p_in=0.3, p_out=0.02, feature_dim=6, signal=3.0, seed=0)
    return dataset.with_splits(generate_split(dataset, SplitSpec(5, 6, 0)))


@pytest.fixture(autouse=True)
def _reset_nodecaps_logger():
    """CLI tests attach handlers; put the package logger back for caplog."""
    yield
    logger = logging.getLogger("nodecaps")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    logger.propagate = True
    logger.setLevel(logging.NOTSET)

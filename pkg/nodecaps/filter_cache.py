"""Build graph filters from a FilterSpec, with an on-disk cache.

Filters depend only on the graph and the filter settings, so they are
stored once per (graph hash, mode, rule, hops, alpha, P, final-sparsify)
and reused across runs. The cache is a directory of sparse-matrix text
files plus a JSON index, the same way classification results are cached
elsewhere: read failures just mean a miss.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

from .config import CACHE_DIR, FilterSpec
from .data_io import export_sparse, import_sparse
from .filenames import hop_filter_name, ppr_filter_name
from .filters import (
    DiffusionFilterParams,
    HopPowerSet,
    build_ppr_filter,
    hop_power_set,
)
from .graph import SparseMatrix, normalize_adjacency

__all__ = ["FilterCache", "build_filter", "cache_key"]

log = logging.getLogger(__name__)

INDEX_FILE = "index.json"


def cache_key(adjacency: SparseMatrix, spec: FilterSpec) -> dict:
    key = {
        "graph": adjacency.fingerprint(),
        "mode": spec.mode,
        "rule": str(spec.rule),
        "symmetrize": spec.symmetrize,
    }
    if spec.mode == "attention":
        key.update(hops=list(spec.hops), final_sparsify=spec.final_sparsify)
    else:
        key.update(alpha=spec.alpha, truncation=spec.truncation)
    return key


def _digest(key: dict) -> str:
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode("utf-8")).hexdigest()[:24]


class FilterCache:
    """Directory-backed store of prepared filter matrices."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root or CACHE_DIR)
        self.hits = 0
        self.misses = 0

    @property
    def index_file(self) -> Path:
        return self.root / INDEX_FILE

    def _load_index(self) -> dict:
        try:
            return json.loads(self.index_file.read_text(encoding="utf-8"))
        except Exception:
            return {}

    def _save_index(self, index: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_file.write_text(json.dumps(index, indent=2, sort_keys=True), encoding="utf-8")

    def get(self, key: dict) -> list[SparseMatrix] | None:
        digest = _digest(key)
        entry = self._load_index().get(digest)
        if entry is None:
            self.misses += 1
            return None
        try:
            matrices = [import_sparse(self.root / digest / name) for name in entry["files"]]
        except Exception as exc:
            log.warning("filter cache entry %s unreadable (%s); rebuilding", digest, exc)
            self.misses += 1
            return None
        self.hits += 1
        log.debug("filter cache hit %s", digest)
        return matrices

    def put(self, key: dict, names: list[str], matrices: list[SparseMatrix]) -> Path:
        digest = _digest(key)
        directory = self.root / digest
        for name, matrix in zip(names, matrices):
            export_sparse(matrix, directory / name)
        index = self._load_index()
        index[digest] = {"key": key, "files": names, "created": time.time()}
        self._save_index(index)
        return directory

    def location(self, key: dict) -> Path:
        return self.root / _digest(key)


def _file_names(spec: FilterSpec) -> list[str]:
    if spec.mode == "attention":
        return [hop_filter_name(h) for h in spec.hops]
    return [ppr_filter_name()]


def build_filter(
    adjacency: SparseMatrix, spec: FilterSpec, cache: FilterCache | None = None
) -> SparseMatrix | HopPowerSet:
    """Hop powers for attention mode, a fixed matrix for PPR mode."""
    key = cache_key(adjacency, spec) if cache is not None else None
    matrices = cache.get(key) if cache is not None else None

    if matrices is None:
        a_tilde = normalize_adjacency(adjacency)
        rule = spec.rule
        if spec.mode == "attention":
            powers = hop_power_set(
                a_tilde,
                spec.hops,
                rule,
                final_rule=rule if spec.final_sparsify else None,
                symmetrize=spec.symmetrize,
            )
            matrices = list(powers.matrices)
        else:
            params = DiffusionFilterParams(spec.alpha, spec.truncation)
            matrices = [build_ppr_filter(a_tilde, params, rule, spec.symmetrize)]
        if cache is not None:
            cache.put(key, _file_names(spec), matrices)

    if spec.mode == "attention":
        return HopPowerSet(spec.hops, tuple(matrices))
    return matrices[0]

"""Tests for filter_cache module -- building filters and reusing them from disk."""

import json

import numpy as np

from nodecaps.config import FilterSpec
from nodecaps.filter_cache import FilterCache, build_filter, cache_key
from nodecaps.filters import HopPowerSet
from nodecaps.graph import SparseMatrix


class TestCacheKey:

    def test_attention_fields(self, graph8):
        key = cache_key(graph8, FilterSpec(max_hop=3, sparsify="topk:4"))
        assert key["hops"] == [1, 2, 3]
        assert key["rule"] == "topk:4"
        assert "alpha" not in key

    def test_ppr_fields(self, graph8):
        key = cache_key(graph8, FilterSpec(mode="ppr", alpha=0.2, truncation=7))
        assert (key["alpha"], key["truncation"]) == (0.2, 7)
        assert "hops" not in key

    def test_graph_changes_key(self, graph8, make_graph):
        spec = FilterSpec()
        assert cache_key(graph8, spec) != cache_key(make_graph(8, 0.4, seed=4), spec)


class TestBuildFilter:

    def test_attention_returns_hop_powers(self, graph8):
        got = build_filter(graph8, FilterSpec(max_hop=3, sparsify="topk:8"))
        assert isinstance(got, HopPowerSet)
        assert got.hops == (1, 2, 3)

    def test_ppr_returns_matrix(self, graph8):
        got = build_filter(graph8, FilterSpec(mode="ppr", truncation=5, sparsify="topk:3"))
        assert isinstance(got, SparseMatrix)
        assert got.row_nnz().max() <= 3

    def test_second_build_hits(self, tmp_path, graph8):
        cache = FilterCache(tmp_path)
        spec = FilterSpec(max_hop=2, sparsify="topk:8")
        first = build_filter(graph8, spec, cache)
        second = build_filter(graph8, spec, cache)
        assert (cache.misses, cache.hits) == (1, 1)
        for a, b in zip(first.matrices, second.matrices):
            assert a == b

    def test_files_and_index(self, tmp_path, graph8):
        cache = FilterCache(tmp_path)
        spec = FilterSpec(max_hop=2)
        build_filter(graph8, spec, cache)
        location = cache.location(cache_key(graph8, spec))
        assert sorted(p.name for p in location.iterdir()) == ["hop1.txt", "hop2.txt"]
        index = json.loads(cache.index_file.read_text())
        assert index[location.name]["files"] == ["hop1.txt", "hop2.txt"]

    def test_unreadable_entry_rebuilds(self, tmp_path, graph8):
        cache = FilterCache(tmp_path)
        spec = FilterSpec(mode="ppr", truncation=4)
        expected = build_filter(graph8, spec, cache)
        (cache.location(cache_key(graph8, spec)) / "ppr.txt").write_text("garbage\n")
        rebuilt = build_filter(graph8, spec, cache)
        assert rebuilt == expected
        assert cache.hits == 0 and cache.misses == 2

    def test_different_settings_miss(self, tmp_path, graph8):
        cache = FilterCache(tmp_path)
        build_filter(graph8, FilterSpec(mode="ppr", truncation=4), cache)
        build_filter(graph8, FilterSpec(mode="ppr", truncation=5), cache)
        assert cache.misses == 2

    def test_cached_values_exact(self, tmp_path, graph8):
        spec = FilterSpec(mode="ppr", alpha=0.15)
        uncached = build_filter(graph8, spec)
        cache = FilterCache(tmp_path)
        build_filter(graph8, spec, cache)
        cached = build_filter(graph8, spec, cache)
        np.testing.assert_array_equal(cached.values, uncached.values)

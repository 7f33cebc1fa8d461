"""Tests for filters module -- pruning, attention and PPR filters, spectral view."""

import math

import numpy as np
import pytest

from nodecaps.errors import ShapeError, ValidationError
from nodecaps.filters import (
    AttentionFilterParams,
    DiffusionFilterParams,
    HopPowerSet,
    SparsifyRule,
    adjacency_poly_to_laplacian_poly,
    attention_weights,
    build_attention_filter,
    build_ppr_filter,
    filter_stats,
    hop_power_set,
    matrix_power_sparsified,
    neighborhood_of,
    ppr_matrix,
)
from nodecaps.graph import SparseMatrix, normalize_adjacency, normalized_laplacian

from .conftest import random_adjacency


def _dense_renormalize(m: np.ndarray) -> np.ndarray:
    d = m.sum(axis=1)
    return m / np.sqrt(np.outer(d, d))


def _dense_topk(m: np.ndarray, k: int) -> np.ndarray:
    """Keep the diagonal plus the k-1 largest off-diagonal entries per row, on both sides."""
    n = len(m)
    keep = np.zeros_like(m, dtype=bool)
    for i in range(n):
        stored = np.flatnonzero(m[i])
        if len(stored) <= k:
            keep[i, stored] = True
            continue
        keep[i, i] = True
        others = stored[stored != i]
        order = others[np.argsort(-m[i, others], kind="stable")][: k - 1]
        keep[i, order] = True
    keep &= keep.T
    return _dense_renormalize(np.where(keep, m, 0.0))


class TestSparsifyRule:

    def test_parse_topk(self):
        rule = SparsifyRule.parse("topk:8")
        assert rule.kind == "topk" and rule.k == 8
        assert str(rule) == "topk:8"

    def test_parse_epsilon(self):
        rule = SparsifyRule.parse("eps:0.001")
        assert rule.kind == "epsilon" and rule.epsilon == 0.001
        assert SparsifyRule.parse(str(rule)) == rule

    @pytest.mark.parametrize("text", ["topk", "topk:0", "topk:x", "eps:-1", "median:3"])
    def test_parse_rejects(self, text):
        with pytest.raises(ValidationError):
            SparsifyRule.parse(text)


class TestMatrixPowerSparsified:

    def test_generous_topk_keeps_pattern(self, graph8):
        a_tilde = normalize_adjacency(graph8)
        k = int(a_tilde.row_nnz().max())
        got = matrix_power_sparsified(a_tilde, 1, SparsifyRule.topk(k))
        np.testing.assert_array_equal(got.row_offsets, a_tilde.row_offsets)
        np.testing.assert_array_equal(got.col_indices, a_tilde.col_indices)

    def test_epsilon_prunes_to_identity(self, two_node):
        got = matrix_power_sparsified(normalize_adjacency(two_node), 1, SparsifyRule.threshold(0.6))
        np.testing.assert_allclose(got.to_dense(), np.eye(2))

    @pytest.mark.parametrize("seed", range(3))
    def test_topk_matches_dense_oracle(self, seed):
        a_tilde = normalize_adjacency(random_adjacency(12, 0.3, seed))
        got = matrix_power_sparsified(a_tilde, 3, SparsifyRule.topk(4))
        assert got.row_nnz().max() <= 4
        base = a_tilde.to_scipy()
        dense_power = ((base @ base) @ base).toarray()
        expected = _dense_topk((dense_power + dense_power.T) / 2, 4)
        np.testing.assert_allclose(got.to_dense(), expected, atol=1e-10, rtol=0)

    @pytest.mark.parametrize("hop", [1, 2, 4])
    def test_diagonal_always_retained(self, make_graph, hop):
        a_tilde = normalize_adjacency(make_graph(16, 0.3, seed=hop))
        got = matrix_power_sparsified(a_tilde, hop, SparsifyRule.topk(1))
        np.testing.assert_array_equal(got.row_nnz(), np.ones(16))
        assert np.all(got.diagonal() > 0)

    def test_result_is_symmetric(self, graph8):
        got = matrix_power_sparsified(normalize_adjacency(graph8), 2, SparsifyRule.topk(3))
        assert got.is_symmetric(atol=1e-15)

    def test_rejects_zero_hop(self, graph8):
        with pytest.raises(ValidationError):
            matrix_power_sparsified(normalize_adjacency(graph8), 0, SparsifyRule.topk(3))


class TestHopPowerSet:

    def test_builds_every_hop(self, graph8):
        powers = hop_power_set(normalize_adjacency(graph8), [3, 1, 2], SparsifyRule.topk(8))
        assert powers.hops == (1, 2, 3)
        assert powers[2] == matrix_power_sparsified(normalize_adjacency(graph8), 2, SparsifyRule.topk(8))
        with pytest.raises(KeyError):
            powers[4]

    def test_final_rule_bounds_rows(self, make_graph):
        a_tilde = normalize_adjacency(make_graph(20, 0.25, seed=5))
        powers = hop_power_set(
            a_tilde, [1, 2, 3], SparsifyRule.topk(20), final_rule=SparsifyRule.topk(5)
        )
        for m in powers.matrices:
            assert m.row_nnz().max() <= 5

    def test_rejects_unsorted_hops(self):
        m = SparseMatrix.identity(2)
        with pytest.raises(ValidationError):
            HopPowerSet((2, 1), (m, m))

    def test_rejects_mismatched_lengths(self):
        with pytest.raises(ShapeError):
            HopPowerSet((1, 2), (SparseMatrix.identity(2),))


class TestAttentionFilter:

    def test_uniform_weights(self):
        np.testing.assert_allclose(attention_weights(np.zeros(4)), np.full(4, 0.25))

    def test_single_hop_is_exact(self, graph8):
        powers = hop_power_set(normalize_adjacency(graph8), [2], SparsifyRule.topk(8))
        got = build_attention_filter(powers, AttentionFilterParams((3.7,)))
        assert got == powers[2]

    def test_weighted_combination(self, graph8):
        powers = hop_power_set(normalize_adjacency(graph8), [1, 2], SparsifyRule.topk(8))
        zeta = (math.log(3.0), 0.0)
        np.testing.assert_allclose(attention_weights(zeta), [0.75, 0.25], atol=1e-15)
        got = build_attention_filter(powers, AttentionFilterParams(zeta))
        expected = 0.75 * powers[1].to_dense() + 0.25 * powers[2].to_dense()
        np.testing.assert_allclose(got.to_dense(), expected, atol=1e-12, rtol=0)

    def test_zeta_length_mismatch(self, graph8):
        powers = hop_power_set(normalize_adjacency(graph8), [1, 2], SparsifyRule.topk(8))
        with pytest.raises(ShapeError):
            build_attention_filter(powers, AttentionFilterParams((0.0,)))

    def test_rejects_non_finite_zeta(self):
        with pytest.raises(ValidationError):
            AttentionFilterParams((0.0, float("nan")))


class TestPprFilter:

    @pytest.mark.parametrize("truncation", [None, 0, 5])
    def test_isolated_node(self, truncation):
        a_tilde = normalize_adjacency(SparseMatrix.from_dense(np.zeros((1, 1))))
        got = build_ppr_filter(a_tilde, DiffusionFilterParams(0.3, truncation), SparsifyRule.topk(4))
        np.testing.assert_allclose(got.to_dense(), [[1.0]])

    def test_truncated_converges_to_exact(self, two_node):
        a_tilde = normalize_adjacency(two_node)
        exact = ppr_matrix(a_tilde, DiffusionFilterParams(0.1)).toarray()
        np.testing.assert_allclose(exact, [[0.55, 0.45], [0.45, 0.55]], atol=1e-14)
        truncated = ppr_matrix(a_tilde, DiffusionFilterParams(0.1, 300)).toarray()
        assert np.max(np.abs(exact - truncated)) < 1e-12

    def test_truncation_error_shrinks(self, make_graph):
        a_tilde = normalize_adjacency(make_graph(10, 0.3, seed=2))
        alpha = 0.1
        exact = ppr_matrix(a_tilde, DiffusionFilterParams(alpha)).toarray()
        errors = []
        for p in (1, 2, 4, 8, 16, 32):
            approx = ppr_matrix(a_tilde, DiffusionFilterParams(alpha, p)).toarray()
            err = np.max(np.abs(exact - approx))
            assert err <= (1 - alpha) ** (p + 1) + 1e-12
            errors.append(err)
        assert all(b <= a for a, b in zip(errors, errors[1:]))
        assert errors[-1] < errors[0]

    def test_topk_row_bound(self, make_graph):
        a_tilde = normalize_adjacency(make_graph(14, 0.3, seed=8))
        got = build_ppr_filter(a_tilde, DiffusionFilterParams(0.1, 20), SparsifyRule.topk(4))
        assert got.row_nnz().max() <= 4
        assert np.all(got.diagonal() > 0)

    def test_exact_refused_above_cap(self, graph8, monkeypatch):
        monkeypatch.setattr("nodecaps.filters.DENSE_PPR_CAP", 4)
        with pytest.raises(ValidationError, match="truncation"):
            ppr_matrix(normalize_adjacency(graph8), DiffusionFilterParams(0.1))

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.2])
    def test_alpha_range(self, alpha):
        with pytest.raises(ValidationError):
            DiffusionFilterParams(alpha)


class TestLaplacianPolynomial:

    def test_pure_adjacency(self):
        assert adjacency_poly_to_laplacian_poly([0.0, 1.0]) == [1.0, -1.0]

    def test_pure_identity(self):
        assert adjacency_poly_to_laplacian_poly([1.0]) == [1.0]

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            adjacency_poly_to_laplacian_poly([])

    @pytest.mark.parametrize("case", range(20))
    def test_polynomials_agree(self, case):
        rng = np.random.default_rng(100 + case)
        n = int(rng.integers(2, 17))
        xi = rng.standard_normal(int(rng.integers(1, 7)))
        adjacency = random_adjacency(n, 0.3, seed=case)
        a_tilde = normalize_adjacency(adjacency).to_dense()
        laplacian = normalized_laplacian(adjacency).to_dense()
        theta = adjacency_poly_to_laplacian_poly(xi)

        lhs = sum(x * np.linalg.matrix_power(a_tilde, i) for i, x in enumerate(xi))
        rhs = sum(t * np.linalg.matrix_power(laplacian, j) for j, t in enumerate(theta))
        assert np.linalg.norm(lhs - rhs) < 1e-10


class TestInspection:

    def test_identity_neighborhood(self):
        assert neighborhood_of(SparseMatrix.identity(3), 1) == [(1, 1.0)]

    def test_two_node_neighborhood(self, two_node):
        assert neighborhood_of(normalize_adjacency(two_node), 0) == [
            (0, pytest.approx(0.5)),
            (1, pytest.approx(0.5)),
        ]

    def test_topk_neighborhood_length(self, graph8):
        m = matrix_power_sparsified(normalize_adjacency(graph8), 2, SparsifyRule.topk(3))
        assert all(len(neighborhood_of(m, i)) <= 3 for i in range(8))

    def test_node_out_of_range(self, two_node):
        with pytest.raises(ValidationError):
            neighborhood_of(two_node, 2)

    def test_stats(self):
        stats = filter_stats(SparseMatrix.identity(3))
        assert stats == {
            "n_nodes": 3,
            "nnz": 3,
            "mean_row_nnz": 1.0,
            "max_row_nnz": 1,
            "min_row_nnz": 1,
        }

"""Tests for capsules module -- primary capsules, routing, squash, prediction."""

import numpy as np
import pytest

from nodecaps.capsules import (
    CapsuleTensor,
    ModelParams,
    baseline_mean_aggregate,
    dropout_mask,
    forward,
    predict,
    primary_capsules,
    resolve_filter,
    routing_forward,
    squash,
)
from nodecaps.errors import ShapeError, ValidationError
from nodecaps.filters import SparsifyRule, hop_power_set
from nodecaps.graph import SparseMatrix, normalize_adjacency

from .conftest import random_adjacency


def _random_params(rng, n_features, k, c, f_p, f_c, n_hops=1) -> ModelParams:
    return ModelParams(
        {
            "primary_weights": rng.standard_normal((k, f_p, n_features)),
            "primary_bias": 0.1 * rng.standard_normal((k, f_p)),
            "routing_weights": rng.standard_normal((k, c, f_c, f_p)),
            "class_bias": 0.1 * rng.standard_normal((c, f_c)),
            "zeta": rng.standard_normal(n_hops),
        }
    )


def _path_graph(n: int) -> SparseMatrix:
    rows = list(range(n - 1)) + list(range(1, n))
    cols = list(range(1, n)) + list(range(n - 1))
    return SparseMatrix.from_triplets(n, n, rows, cols, np.ones(2 * (n - 1)))


def _reference_routing(h, a_bar, w, b, T):
    """Loop-by-loop routing: T+1 coupling passes, logits updated between passes."""
    n, k = h.shape[:2]
    c, f_c = b.shape
    u = np.zeros((n, k, c, f_c))
    for j in range(n):
        for kk in range(k):
            for l in range(c):
                u[j, kk, l] = w[kk, l] @ h[j, kk]

    logits = np.zeros((n, k, c))
    for t in range(T + 1):
        coupling = np.zeros((n, k, c))
        for j in range(n):
            for l in range(c):
                e = np.exp(logits[j, :, l] - logits[j, :, l].max())
                coupling[j, :, l] = e / e.sum()
        s = np.zeros((n, c, f_c))
        for j in range(n):
            for l in range(c):
                for kk in range(k):
                    s[j, l] += coupling[j, kk, l] * u[j, kk, l]
        v = np.zeros((n, c, f_c))
        for i in range(n):
            for l in range(c):
                z = b[l].copy()
                for j in range(n):
                    if a_bar[i, j] != 0:
                        z += a_bar[i, j] * s[j, l]
                norm = np.linalg.norm(z)
                v[i, l] = z * norm / (1 + norm * norm)
        if t < T:
            for j in range(n):
                for kk in range(k):
                    for l in range(c):
                        logits[j, kk, l] += v[j, l] @ u[j, kk, l]
    return v


class TestPrimaryCapsules:

    def _single(self, weights, bias):
        return ModelParams(
            {
                "primary_weights": weights,
                "primary_bias": bias,
                "routing_weights": np.ones((1, 2, 2, 2)),
                "class_bias": np.zeros((2, 2)),
                "zeta": np.zeros(1),
            }
        )

    def test_normalizes_projection(self):
        params = self._single(np.eye(2)[None], np.zeros((1, 2)))
        h = primary_capsules(np.array([[3.0, 4.0]]), params)
        np.testing.assert_allclose(h.data[0, 0], [0.6, 0.8], atol=1e-15)

    def test_zero_preactivation_stays_zero(self):
        params = self._single(np.zeros((1, 2, 2)), np.zeros((1, 2)))
        h = primary_capsules(np.array([[3.0, 4.0]]), params)
        np.testing.assert_array_equal(h.data, np.zeros((1, 1, 2)))

    def test_unit_or_zero_norms(self):
        rng = np.random.default_rng(0)
        params = _random_params(rng, 6, 4, 2, 5, 3)
        lengths = primary_capsules(rng.standard_normal((30, 6)), params).lengths()
        unit = np.abs(lengths - 1.0) <= 1e-9
        assert np.all(unit | (lengths == 0))

    def test_dropout_mask_applied(self):
        params = self._single(np.eye(2)[None], np.zeros((1, 2)))
        mask = np.array([[[0.0, 2.0]]])
        h = primary_capsules(np.array([[3.0, 4.0]]), params, mask)
        np.testing.assert_allclose(h.data[0, 0], [0.0, 1.0])

    def test_feature_width_checked(self):
        params = self._single(np.eye(2)[None], np.zeros((1, 2)))
        with pytest.raises(ShapeError):
            primary_capsules(np.ones((1, 3)), params)

    def test_non_finite_features(self):
        params = self._single(np.eye(2)[None], np.zeros((1, 2)))
        with pytest.raises(ValidationError):
            primary_capsules(np.array([[np.nan, 1.0]]), params)


class TestSquash:

    def test_zero(self):
        np.testing.assert_array_equal(squash(np.zeros(3)), np.zeros(3))

    @pytest.mark.parametrize("norm, expected", [(1.0, 0.5), (10.0, 100.0 / 101.0)])
    def test_known_lengths(self, norm, expected):
        u = np.array([0.6, 0.8]) * norm
        assert np.linalg.norm(squash(u)) == pytest.approx(expected, abs=1e-12)

    def test_bounded_and_parallel(self):
        rng = np.random.default_rng(4)
        u = rng.standard_normal((100_000, 4)) * np.exp(rng.uniform(-5, 5, size=(100_000, 1)))
        v = squash(u)
        lengths = np.linalg.norm(v, axis=-1)
        assert np.all(lengths >= 0) and np.all(lengths < 1)
        direction_u = u / np.linalg.norm(u, axis=-1, keepdims=True)
        direction_v = v / lengths[:, None]
        np.testing.assert_allclose(direction_v, direction_u, atol=1e-10)


class TestRouting:

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        n, f, k, c, f_p, f_c, T = 5, 4, 3, 2, 3, 2, 3
        params = _random_params(rng, f, k, c, f_p, f_c)
        a_bar = normalize_adjacency(random_adjacency(n, 0.5, seed))
        primaries = primary_capsules(rng.standard_normal((n, f)), params)

        got, _ = routing_forward(primaries, a_bar, params, T)
        expected = _reference_routing(
            primaries.data, a_bar.to_dense(), params["routing_weights"], params["class_bias"], T
        )
        np.testing.assert_allclose(got.data, expected, atol=1e-12, rtol=0)

    def test_single_primary_capsule(self, graph8):
        rng = np.random.default_rng(1)
        params = _random_params(rng, 5, 1, 3, 4, 2)
        a_bar = normalize_adjacency(graph8)
        primaries = primary_capsules(rng.standard_normal((8, 5)), params)
        seen = []
        caps, state = routing_forward(
            primaries, a_bar, params, 3, observer=lambda t, c, v: seen.append(c)
        )
        assert all(np.array_equal(c, np.ones_like(c)) for c in seen)
        u = np.einsum("nkp,kldp->nld", primaries.data, params["routing_weights"])
        z = np.einsum("ij,jld->ild", a_bar.to_dense(), u) + params["class_bias"]
        np.testing.assert_allclose(caps.data, squash(z), atol=1e-12)

    def test_couplings_on_simplex(self, graph8):
        rng = np.random.default_rng(2)
        params = _random_params(rng, 5, 4, 3, 4, 2)
        primaries = primary_capsules(rng.standard_normal((8, 5)), params)
        seen = []
        routing_forward(
            primaries, normalize_adjacency(graph8), params, 4, observer=lambda t, c, v: seen.append(c)
        )
        assert len(seen) == 5
        for c in seen:
            np.testing.assert_allclose(c.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(c > 0)

    def test_first_pass_is_uniform_mean(self, graph8):
        rng = np.random.default_rng(3)
        k = 4
        params = _random_params(rng, 5, k, 2, 3, 2)
        a_bar = normalize_adjacency(graph8)
        primaries = primary_capsules(rng.standard_normal((8, 5)), params)
        passes = {}
        routing_forward(primaries, a_bar, params, 2, observer=lambda t, c, v: passes.setdefault(t, (c, v)))

        couplings, v0 = passes[0]
        np.testing.assert_array_equal(couplings, np.full_like(couplings, 1.0 / k))
        u = np.einsum("nkp,kldp->nkld", primaries.data, params["routing_weights"])
        z = a_bar.to_dense() @ u.mean(axis=1).reshape(8, -1)
        expected = squash(z.reshape(8, 2, 2) + params["class_bias"])
        np.testing.assert_allclose(v0, expected, atol=1e-12)

    def test_final_state_matches_last_pass(self, graph8):
        rng = np.random.default_rng(5)
        params = _random_params(rng, 5, 3, 2, 3, 2)
        primaries = primary_capsules(rng.standard_normal((8, 5)), params)
        passes = []
        caps, state = routing_forward(
            primaries, normalize_adjacency(graph8), params, 2, observer=lambda t, c, v: passes.append((c, v))
        )
        np.testing.assert_array_equal(state.couplings, passes[-1][0])
        np.testing.assert_array_equal(caps.data, passes[-1][1])
        e = np.exp(state.logits - state.logits.max(axis=1, keepdims=True))
        np.testing.assert_allclose(state.couplings, e / e.sum(axis=1, keepdims=True), atol=1e-15)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        n = 10
        params = _random_params(rng, 4, 3, 3, 3, 2)
        adjacency = random_adjacency(n, 0.3, 6).to_dense()
        features = rng.standard_normal((n, 4))
        perm = rng.permutation(n)

        base, _ = forward(features, normalize_adjacency(SparseMatrix.from_dense(adjacency)), params, 3)
        moved = SparseMatrix.from_dense(adjacency[np.ix_(perm, perm)])
        permuted, _ = forward(features[perm], normalize_adjacency(moved), params, 3)
        np.testing.assert_allclose(permuted.data, base.data[perm], atol=1e-12)

    def test_locality(self):
        rng = np.random.default_rng(8)
        params = _random_params(rng, 4, 3, 2, 3, 2)
        a_bar = normalize_adjacency(_path_graph(8))
        features = rng.standard_normal((8, 4))
        far = features.copy()
        far[3:] = 0.0

        def run(x, T):
            passes = []
            caps, _ = forward(x, a_bar, params, T, observer=lambda t, c, v: passes.append(v))
            return caps.data, passes[0]

        # one pass sees {0, 1}; T+1 passes see the (T+1)-hop ball {0, 1, 2}
        caps, first = run(features, 1)
        caps_far, first_far = run(far, 1)
        np.testing.assert_allclose(first_far[0], first[0], rtol=0, atol=1e-15)
        np.testing.assert_allclose(caps_far[0], caps[0], rtol=0, atol=1e-15)
        assert not np.allclose(caps_far[2], caps[2])

    def test_hop_set_filter_uses_zeta(self, graph8):
        rng = np.random.default_rng(9)
        params = _random_params(rng, 5, 3, 2, 3, 2, n_hops=2)
        powers = hop_power_set(normalize_adjacency(graph8), [1, 2], SparsifyRule.topk(8))
        features = rng.standard_normal((8, 5))
        via_powers, _ = forward(features, powers, params, 2)
        via_matrix, _ = forward(features, resolve_filter(powers, params["zeta"]), params, 2)
        np.testing.assert_allclose(via_powers.data, via_matrix.data, atol=1e-12)

    def test_rejects_zero_iterations(self, graph8):
        rng = np.random.default_rng(0)
        params = _random_params(rng, 5, 3, 2, 3, 2)
        primaries = primary_capsules(rng.standard_normal((8, 5)), params)
        with pytest.raises(ValidationError):
            routing_forward(primaries, normalize_adjacency(graph8), params, 0)

    def test_filter_size_mismatch(self, two_node):
        rng = np.random.default_rng(0)
        params = _random_params(rng, 5, 3, 2, 3, 2)
        primaries = primary_capsules(rng.standard_normal((3, 5)), params)
        with pytest.raises(ShapeError):
            routing_forward(primaries, normalize_adjacency(two_node), params, 1)


class TestPredict:

    def _caps(self, lengths):
        return CapsuleTensor(np.array(lengths, dtype=float)[None, :, None])

    def test_longest_wins(self):
        assert predict(self._caps([0.9, 0.1, 0.3])).tolist() == [0]
        assert predict(self._caps([0.1, 0.2, 0.3])).tolist() == [2]

    def test_ties_go_to_lowest_class(self):
        assert predict(self._caps([0.4, 0.4, 0.4])).tolist() == [0]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        data = rng.standard_normal((50, 4, 3))
        expected = [int(np.argmax([np.linalg.norm(data[i, l]) for l in range(4)])) for i in range(50)]
        assert predict(CapsuleTensor(data)).tolist() == expected

    @pytest.mark.parametrize("scale", [0.01, 0.5, 2.0, 10.0])
    def test_squash_keeps_winner_under_scaling(self, scale):
        rng = np.random.default_rng(4)
        raw = rng.standard_normal((40, 5, 3))
        expected = predict(CapsuleTensor(raw))
        assert predict(CapsuleTensor(squash(scale * raw))).tolist() == expected.tolist()


class TestModelParams:

    def test_initialize_shapes(self):
        params = ModelParams.initialize(10, 3, n_primary_caps=4, primary_dim=6, class_dim=2, n_hops=2)
        assert params["primary_weights"].shape == (4, 6, 10)
        assert params["routing_weights"].shape == (4, 3, 2, 6)
        assert params["class_bias"].shape == (3, 2)
        np.testing.assert_array_equal(params.hop_attention(), [0.5, 0.5])
        assert (params.n_primary_caps, params.n_classes, params.n_features) == (4, 3, 10)

    def test_initialize_is_seeded(self):
        a = ModelParams.initialize(5, 2, n_primary_caps=2, primary_dim=3, class_dim=2, seed=4)
        b = ModelParams.initialize(5, 2, n_primary_caps=2, primary_dim=3, class_dim=2, seed=4)
        for name, arr in a.arrays().items():
            np.testing.assert_array_equal(arr, b[name])

    def test_assign_bumps_generation(self):
        params = ModelParams.initialize(5, 2, n_primary_caps=2, primary_dim=3, class_dim=2)
        params.assign("zeta", np.array([1.0]))
        assert params.generation == 1
        with pytest.raises(ShapeError):
            params.assign("zeta", np.zeros(2))

    def test_copy_is_independent(self):
        params = ModelParams.initialize(5, 2, n_primary_caps=2, primary_dim=3, class_dim=2)
        clone = params.copy()
        params.assign("class_bias", np.ones((2, 2)))
        np.testing.assert_array_equal(clone["class_bias"], np.zeros((2, 2)))

    def test_missing_array(self):
        with pytest.raises(ValidationError, match="missing"):
            ModelParams({"zeta": np.zeros(1)})

    def test_dropout_mask(self):
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(dropout_mask(rng, (3, 2), 0.0), np.ones((3, 2)))
        mask = dropout_mask(rng, (200, 50), 0.5)
        assert set(np.unique(mask)) <= {0.0, 2.0}
        assert abs(mask.mean() - 1.0) < 0.05
        with pytest.raises(ValidationError):
            dropout_mask(rng, (2,), 1.0)


class TestBaseline:

    def test_single_layer_identity(self):
        features = np.array([[1.0, -2.0], [-0.5, 3.0]])
        out = baseline_mean_aggregate(features, SparseMatrix.identity(2), 1, np.eye(2))
        np.testing.assert_array_equal(out, np.maximum(features, 0.0))

    def test_rows_converge(self, two_node):
        features = np.array([[1.0, 0.0], [0.0, 1.0]])
        a_tilde = normalize_adjacency(two_node)
        gaps = [
            np.linalg.norm(np.diff(baseline_mean_aggregate(features, a_tilde, depth, np.eye(2)), axis=0))
            for depth in (1, 3, 6)
        ]
        assert gaps[0] < np.sqrt(2)
        assert gaps[2] <= gaps[1] <= gaps[0]

    def test_shape_preserved(self, graph8):
        features = np.random.default_rng(0).standard_normal((8, 5))
        out = baseline_mean_aggregate(features, normalize_adjacency(graph8), 4, seed=1)
        assert out.shape == (8, 5)
        out = baseline_mean_aggregate(features, normalize_adjacency(graph8), 2, width=3, seed=1)
        assert out.shape == (8, 3)

    def test_rejects_zero_layers(self, graph8):
        with pytest.raises(ValidationError):
            baseline_mean_aggregate(np.ones((8, 2)), normalize_adjacency(graph8), 0)

"""Tests for gradcheck module -- finite-difference agreement and negative controls."""

import numpy as np
import pytest

from nodecaps import autodiff as ad
from nodecaps.capsules import PARAM_NAMES
from nodecaps.errors import ValidationError
from nodecaps.gradcheck import (
    analytic_gradients,
    corrupted_adjoint,
    make_instance,
    passed,
    relative_error,
    run_gradcheck,
)


class TestRelativeError:

    def test_identical(self):
        assert relative_error(np.array([1.0, -2.0]), np.array([1.0, -2.0])) == 0.0

    def test_both_zero(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0

    def test_scaled_by_largest_magnitude(self):
        assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


class TestGradcheck:

    def test_attention_mode_passes(self):
        rows = run_gradcheck("tiny", "attention", seed=0)
        assert [r.name for r in rows] == list(PARAM_NAMES)
        assert all(r.status == "ok" for r in rows), rows
        assert passed(rows)

    def test_ppr_mode_reports_unused_zeta(self):
        rows = {r.name: r for r in run_gradcheck("tiny", "ppr", seed=1)}
        assert rows["zeta"].status == "unused"
        assert rows["zeta"].max_rel_error == 0.0
        assert all(r.status == "ok" for name, r in rows.items() if name != "zeta")

    def test_zeta_gradient_is_zero_in_ppr_mode(self):
        grads = analytic_gradients(make_instance("tiny", "ppr", seed=2))
        np.testing.assert_array_equal(grads["zeta"], np.zeros_like(grads["zeta"]))
        assert "zeta" not in grads.reached

    def test_corrupted_adjoint_fails(self):
        with corrupted_adjoint("squash"):
            rows = run_gradcheck("tiny", "attention", seed=0)
        assert not passed(rows)
        assert "squash" in ad.ADJOINTS
        # registry restored on exit
        assert passed(run_gradcheck("tiny", "attention", seed=0))

    def test_unknown_adjoint(self):
        with pytest.raises(ValidationError):
            with corrupted_adjoint("no-such-op"):
                pass

    @pytest.mark.parametrize("size, mode", [("huge", "attention"), ("tiny", "spectral")])
    def test_bad_instance_arguments(self, size, mode):
        with pytest.raises(ValidationError):
            make_instance(size, mode)

    def test_instance_dimensions(self):
        instance = make_instance("tiny", "attention")
        assert instance.features.shape == (12, 6)
        assert instance.params.n_primary_caps == 3
        assert instance.params.n_classes == 2
        assert instance.params["primary_weights"].shape == (3, 5, 6)
        assert instance.cfg.routing_iters == 2

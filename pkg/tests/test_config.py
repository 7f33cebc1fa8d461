"""Tests for config module -- run hyperparameters, overrides, presets."""

import json

import pytest

from nodecaps.config import FilterSpec, TrainConfig, load_train_config, preset_for
from nodecaps.errors import ValidationError


class TestFilterSpec:

    def test_defaults(self):
        spec = FilterSpec()
        assert spec.mode == "attention"
        assert spec.hops == (1, 2)
        assert spec.rule.kind == "topk"

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(mode="diffusion"),
            dict(max_hop=0),
            dict(alpha=0.0),
            dict(alpha=1.0),
            dict(truncation=-1),
            dict(sparsify="topk:0"),
            dict(sparsify="nope"),
            dict(symmetrize="sometimes"),
            dict(alpha="0.1"),
            dict(max_hop="2"),
            dict(max_hop=2.5),
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValidationError):
            FilterSpec(**kwargs)

    def test_truncation_zero_allowed(self):
        assert FilterSpec(mode="ppr", truncation=0).truncation == 0

    def test_unknown_keys(self):
        with pytest.raises(ValidationError, match="colour"):
            FilterSpec.from_dict({"mode": "ppr", "colour": "red"})


class TestTrainConfig:

    def test_dict_round_trip(self):
        cfg = TrainConfig(routing_iters=5, filter=FilterSpec(mode="ppr", truncation=10))
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_filter_dict_coerced(self):
        cfg = TrainConfig(filter={"mode": "ppr", "alpha": 0.2})
        assert cfg.filter == FilterSpec(mode="ppr", alpha=0.2)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(dropout_p=1.0),
            dict(dropout_p=0.0),
            dict(m_plus=0.2, m_minus=0.8),
            dict(m_plus=1.0),
            dict(loss_lambda=0.0),
            dict(learning_rate=-1.0),
            dict(weight_decay=float("nan")),
            dict(routing_iters=0),
            dict(n_classes=1),
            dict(epochs=-1),
            dict(per_class_train=True),
            dict(epochs="x"),
            dict(epochs=None),
            dict(seed="0"),
            dict(learning_rate="fast"),
            dict(m_plus=None),
            dict(filter=3),
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValidationError):
            TrainConfig(**kwargs)

    def test_replace_with_aliases(self):
        cfg = TrainConfig().replace(K=4, T=2, lr=0.05, max_hop=5, mode="attention")
        assert (cfg.n_primary_caps, cfg.routing_iters, cfg.learning_rate) == (4, 2, 0.05)
        assert cfg.filter.max_hop == 5

    def test_replace_nested_key(self):
        cfg = TrainConfig().replace(**{"filter.symmetrize": "either", "filter.final_sparsify": True})
        assert cfg.filter.symmetrize == "either"
        assert cfg.filter.final_sparsify

    def test_replace_validates(self):
        with pytest.raises(ValidationError):
            TrainConfig().replace(alpha=2.0)

    def test_replace_unknown(self):
        with pytest.raises(ValidationError):
            TrainConfig().replace(colour="red")
        with pytest.raises(ValidationError):
            TrainConfig().replace(**{"filter.colour": "red"})

    @pytest.mark.parametrize(
        "key, kind", [("T", int), ("lr", float), ("mode", str), ("decay_all", bool), ("truncation", int)]
    )
    def test_field_type(self, key, kind):
        assert TrainConfig().field_type(key) is kind

    def test_field_type_unknown(self):
        with pytest.raises(ValidationError):
            TrainConfig().field_type("colour")


class TestLoadTrainConfig:

    def test_load(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"epochs": 12, "filter": {"max_hop": 4}}))
        cfg = load_train_config(path)
        assert cfg.epochs == 12
        assert cfg.filter.max_hop == 4

    @pytest.mark.parametrize(
        "text",
        [
            "{not json",
            "[1, 2]",
            '{"epochs": 1, "bogus": 2}',
            '{"epochs": "x"}',
            '{"epochs": null}',
            '{"filter": "ppr"}',
            '{"filter": {"alpha": "high"}}',
        ],
    )
    def test_rejects(self, tmp_path, text):
        path = tmp_path / "cfg.json"
        path.write_text(text)
        with pytest.raises(ValidationError):
            load_train_config(path)


class TestPresets:

    def test_cora(self):
        cfg = preset_for("Cora")
        assert cfg.filter.alpha == 0.05
        assert cfg.weight_decay == 5e-3

    @pytest.mark.parametrize("name", ["pubmed", "amazon-photo", "amazon-computers"])
    def test_larger_decay(self, name):
        assert preset_for(name).weight_decay == 1e-2

    def test_unknown_returns_base(self):
        base = TrainConfig(epochs=3)
        assert preset_for("toy", base) is base

    def test_preset_keeps_base_fields(self):
        assert preset_for("citeseer", TrainConfig(epochs=3)).epochs == 3

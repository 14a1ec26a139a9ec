import math

import numpy as np
import pytest

from relbridge import bridge as B
from relbridge import tensor as T
from relbridge.datasets import RelationalDataset, Split, SynthSpec, synth_relational
from relbridge.errors import ConfigurationError, IntegrityError, InvalidArgumentError, TrainingDivergedError
from relbridge.table import Column, ColumnKind, Table

from conftest import toy_dataset

SMALL = dict(d=4, heads=2, n_blocks=1, d_table=6, graph_layers=[5, 3], epochs=3, patience=2)


@pytest.fixture(scope="module")
def synth_small():
    return synth_relational(SynthSpec(n_target=240, n_aux=40, per_class=10, n_val=60, n_test=80), seed=0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        B.BridgeConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        B.BridgeConfig(integrate="add", graph_layers=[8, 16], d_table=32)
    with pytest.raises(ConfigurationError):
        B.BridgeConfig.from_dict({"learning_rate": 0.1})
    cfg = B.BridgeConfig(lr=0.5)
    assert B.BridgeConfig.from_dict(cfg.to_dict()) == cfg


def test_single_table_dataset_degenerates_to_encoder():
    t = Table("t", [
        Column("id", ColumnKind.IDENTIFIER, ["a", "b", "c"]),
        Column("x", ColumnKind.CATEGORICAL, ["p", "q", "p"]),
        Column("y", ColumnKind.CATEGORICAL, ["0", "1", "0"]),
    ], "id")
    ds = RelationalDataset("one", {"t": t}, [], "t", "y", split=Split([0, 1], [2], []))
    prep = B.prepare(ds, B.BridgeConfig(**SMALL))
    model = B.BridgeModel(prep, B.BridgeConfig(**SMALL))
    np.testing.assert_array_equal(model.assemble_node_features(prep).data, model.table_encoder(prep.features["t"]).data)


def test_block_locality_of_node_features(toy):
    cfg = B.BridgeConfig(**SMALL)
    prep = B.prepare(toy, cfg)
    assert prep.type_order == ["users", "movies"] and prep.offsets == {"users": 0, "movies": 4}
    model = B.BridgeModel(prep, cfg)
    before = model.assemble_node_features(prep).data
    prep.features["movies"].categorical[1, 0] = 2 if prep.features["movies"].categorical[1, 0] == 1 else 1
    after = model.assemble_node_features(prep).data
    changed = np.flatnonzero(np.any(before != after, axis=1))
    assert changed.tolist() == [prep.offsets["movies"] + 1]


def test_misaligned_blocks_raise(toy):
    cfg = B.BridgeConfig(**SMALL)
    prep = B.prepare(toy, cfg)
    model = B.BridgeModel(prep, cfg)
    prep.offsets["movies"] = 3
    with pytest.raises(IntegrityError):
        model.assemble_node_features(prep)


def test_identity_graph_without_layers_is_head_of_doubled_embedding(toy):
    cfg = B.BridgeConfig(**{**SMALL, "graph_layers": []}, identity_adjacency=True)
    prep = B.prepare(toy, cfg)
    model = B.BridgeModel(prep, cfg).eval()
    emb = model.table_encoder(prep.features["users"]).data
    expected = np.concatenate([emb, emb], axis=1) @ model.head.weight.data + model.head.bias.data
    np.testing.assert_allclose(model(prep).data, expected, rtol=1e-12)


def permuted_toy(perm):
    """The toy dataset with target rows reordered; row ``i`` moves to ``perm[i]``."""
    ds = toy_dataset()
    order = np.argsort(perm)
    ds.tables["users"] = ds.tables["users"].take(order)
    ds.split = Split(*(np.sort(perm[p]) for p in (ds.split.train, ds.split.val, ds.split.test)))
    return ds


def test_permuting_target_rows_permutes_logits(toy):
    cfg = B.BridgeConfig(**SMALL)
    prep = B.prepare(toy, cfg)
    logits = B.BridgeModel(prep, cfg).eval()(prep).data
    perm = np.array([2, 0, 3, 1])
    pprep = B.prepare(permuted_toy(perm), cfg)
    plogits = B.BridgeModel(pprep, cfg).eval()(pprep).data
    assert np.array_equal(plogits[perm], logits)


def test_one_epoch_populates_every_gradient(toy):
    cfg = B.BridgeConfig(**SMALL)
    prep = B.prepare(toy, cfg)
    model = B.BridgeModel(prep, cfg)
    loss = T.softmax_cross_entropy(model(prep, np.random.default_rng(0)), prep.labels, prep.split.train)
    T.backward(loss)
    missing = [n for n, p in model.named_parameters() if p.grad is None]
    assert missing == []
    result = B.train(toy, B.BridgeConfig(**{**SMALL, "epochs": 1}))
    assert len(result.history) == 1 and math.isfinite(result.history[0]["train_loss"])


def test_initial_loss_is_log_c(synth_small):
    result = B.train(synth_small, B.BridgeConfig(**{**SMALL, "epochs": 1}))
    assert result.history[0]["train_loss"] == pytest.approx(math.log(4), abs=0.01)


def test_training_is_deterministic(synth_small):
    cfg = B.BridgeConfig(**{**SMALL, "epochs": 5, "seed": 3})
    a, b = B.train(synth_small, cfg), B.train(synth_small, cfg)
    assert a.history == b.history
    assert a.evaluate() == b.evaluate()


def test_degenerate_graph_equals_table_only(synth_small):
    base = {**SMALL, "epochs": 6, "graph_layers": []}
    degenerate = B.train(synth_small, B.BridgeConfig(**base, identity_adjacency=True))
    table_only = B.train(synth_small, B.BridgeConfig(**base, use_graph=False))
    assert degenerate.history == table_only.history
    assert degenerate.evaluate() == table_only.evaluate()


def test_early_stopping_keeps_best_validation_state(synth_small):
    result = B.train(synth_small, B.BridgeConfig(**{**SMALL, "epochs": 30, "patience": 5, "lr": 0.05}))
    accs = [h["val_acc"] for h in result.history]
    assert result.best_val_acc == max(accs)
    assert result.best_epoch == accs.index(max(accs))
    assert result.evaluate("val") == result.best_val_acc
    assert len(result.history) <= result.best_epoch + 6


def test_masked_loss_independence_is_directional(synth_small):
    outside = np.setdiff1d(np.arange(synth_small.target.row_count), synth_small.split.train)

    def first_loss(cfg, ds_prep):
        model = B.BridgeModel(ds_prep, cfg).eval()
        return T.softmax_cross_entropy(model(ds_prep), ds_prep.labels, ds_prep.split.train).item()

    for identity, expect_same in ((True, True), (False, False)):
        cfg = B.BridgeConfig(**SMALL, identity_adjacency=identity)
        prep = B.prepare(synth_small, cfg)
        before = first_loss(cfg, prep)
        prep.features["target"].categorical[outside] = 0
        after = first_loss(cfg, prep)
        assert (before == after) is expect_same


def test_divergence_is_reported(monkeypatch, toy):
    real = T.softmax_cross_entropy
    monkeypatch.setattr(T, "softmax_cross_entropy", lambda *a: T.scale(real(*a), float("nan")))
    with pytest.raises(TrainingDivergedError) as err:
        B.train(toy, B.BridgeConfig(**SMALL))
    assert err.value.epoch == 0 and math.isnan(err.value.loss)
    assert "head.weight" in err.value.grad_norms


def test_evaluate_rules():
    labels = np.array([0, 1, 2, 1])
    perfect = np.eye(3)[labels] * 100
    assert B.accuracy(perfect.argmax(1), labels, [0, 1, 2, 3]) == 1.0
    tied = np.zeros((4, 3)).argmax(1)
    assert B.accuracy(tied, labels, [0, 1, 2, 3]) == 0.25
    with pytest.raises(InvalidArgumentError):
        B.accuracy(tied, labels, [])


@pytest.mark.parametrize("n_classes", [7, 11])
def test_random_baseline_near_one_over_c(n_classes):
    labels = np.arange(1000) % n_classes
    accs = [B.random_accuracy(labels, np.arange(1000), n_classes, np.random.default_rng(s)) for s in range(5)]
    assert abs(np.mean(accs) - 1 / n_classes) < 0.03


def test_checkpoint_round_trip(tmp_path, toy):
    cfg = B.BridgeConfig(**SMALL)
    result = B.train(toy, cfg)
    B.save_checkpoint(result.model, tmp_path / "m.npz")
    fresh = B.BridgeModel(result.prepared, B.BridgeConfig(**{**SMALL, "seed": 9}))
    B.load_checkpoint(fresh, tmp_path / "m.npz")
    np.testing.assert_array_equal(fresh.eval()(result.prepared).data, result.model(result.prepared).data)
    B.write_history(result.history, tmp_path / "h.jsonl")
    assert len((tmp_path / "h.jsonl").read_text().splitlines()) == len(result.history)


def test_add_integration(toy):
    cfg = B.BridgeConfig(**{**SMALL, "graph_layers": [5, 6]}, integrate="add")
    prep = B.prepare(toy, cfg)
    assert B.BridgeModel(prep, cfg)(prep, np.random.default_rng(0)).shape == (4, 2)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsgnn import protocol
from dsgnn.autodiff import Tensor
from dsgnn.graph import synthetic_graph_task, synthetic_node_task
from dsgnn.metrics import accuracy, col_diff, rmse, row_diff
from dsgnn.models import ArchitectureSpec, build_model
from dsgnn.protocol import (
    GridPoint,
    RunRecord,
    RunTask,
    cross_validate,
    mean_sd,
    repeat_fixed_splits,
    select_best,
)
from dsgnn.training import (
    OptimizerState,
    RunResult,
    TrainConfig,
    layer_diagnostics,
    lr_at,
    optimizer_step,
    train_run,
)
from oracles import col_diff_loops, row_diff_loops


def _param(value, grad):
    p = Tensor([[value]], requires_grad=True)
    p.grad = np.array([[grad]])
    return p


def test_sgd_vanilla_step():
    p = _param(0.0, 1.0)
    optimizer_step(OptimizerState(kind="sgd", lr=0.1, momentum=0.0), [p])
    assert p.values[0, 0] == pytest.approx(-0.1)
    assert p.grad is None


def test_sgd_momentum_and_weight_decay_two_steps():
    p = _param(1.0, 1.0)
    state = OptimizerState(kind="sgd", lr=0.1, momentum=0.9, weight_decay=0.5)
    optimizer_step(state, [p])          # v = 1 + 0.5 = 1.5, theta = 0.85
    p.grad = np.array([[1.0]])
    optimizer_step(state, [p])          # v = 1.35 + 1 + 0.425 = 2.775, theta = 0.5725
    assert p.values[0, 0] == pytest.approx(0.5725, abs=1e-15)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_learning_rate_is_identity(kind):
    p = _param(0.7, 3.0)
    optimizer_step(OptimizerState(kind=kind, lr=0.0, weight_decay=0.1), [p])
    assert p.values[0, 0] == 0.7


def test_adam_first_step_is_learning_rate():
    p = _param(0.0, 1.0)
    optimizer_step(OptimizerState(kind="adam", lr=0.01), [p])
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    assert p.values[0, 0] == pytest.approx(-0.01 / (1 + 1e-8), abs=1e-16)


def test_optimizer_requires_gradients():
    p = Tensor([[1.0]], requires_grad=True)
    with pytest.raises(ValueError, match="no gradient"):
        optimizer_step(OptimizerState(), [p])


def test_lr_schedule():
    assert lr_at(0.01, 0) == 0.01
    assert lr_at(0.01, 249) == 0.01
    assert lr_at(0.01, 250, 0.5, 250) == 0.005
    assert lr_at(0.01, 600, 0.5, 250) == pytest.approx(0.0025)
    assert lr_at(0.01, 600, 0.5, 0) == 0.01


def test_accuracy_and_rmse():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75
    assert accuracy([1, 2, 3, 4], [9, 2, 3, 0], subset=[1, 2]) == 1.0
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(3.5355339059327378, abs=1e-15)
    with pytest.raises(ValueError):
        accuracy([1], [1], subset=[])
    with pytest.raises(ValueError):
        rmse([], [])


@settings(max_examples=30)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20))
def test_rmse_squared_is_mse(values):
    pred = np.array(values)
    target = np.zeros_like(pred)
    assert abs(rmse(pred, target) ** 2 - np.mean(pred ** 2)) < 1e-12 * max(1.0, np.mean(pred ** 2))


def test_row_and_col_diff_examples():
    assert row_diff(np.ones((4, 3))) == 0.0
    assert row_diff(np.array([[0.0, 0.0], [3.0, 4.0]])) == 5.0
    c = np.array([1.0, 2.0, 3.0])
    assert col_diff(np.stack([c, 2 * c], axis=1)) == pytest.approx(0.0, abs=1e-15)
    assert col_diff(np.eye(2)) == pytest.approx(np.sqrt(2), abs=1e-15)
    with pytest.raises(ValueError):
        row_diff(np.ones((1, 3)))
    with pytest.raises(ValueError):
        col_diff(np.ones((3, 1)))


def test_diff_metrics_match_double_loops():
    rng = np.random.default_rng(0)
    for _ in range(20):
        H = rng.normal(size=(20, 8))
        assert abs(row_diff(H) - row_diff_loops(H)) < 1e-12
        assert abs(col_diff(H) - col_diff_loops(H)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_diff_metric_symmetries(seed):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(7, 4))
    assert row_diff(H[rng.permutation(7)]) == pytest.approx(row_diff(H), rel=1e-12)
    scales = rng.uniform(0.1, 10, size=4)
    assert col_diff(H * scales) == pytest.approx(col_diff(H), rel=1e-10)


def _node_ds(**kw):
    args = dict(num_nodes=90, num_classes=3, homophily=0.9, feature_dim=6, noise=1.0, seed=0, num_val=30)
    args.update(kw)
    return synthetic_node_task(**args)


def _spec(**kw):
    args = dict(variant="dsgnn", depth=3, hidden=4, num_heads=2, num_classes=3)
    args.update(kw)
    return ArchitectureSpec(**args)


def test_zero_epochs_reports_initial_model():
    ds = _node_ds()
    m = build_model(_spec(), 6, seed=1)
    before = m.state()
    r = train_run(m, ds, TrainConfig(epochs=0))
    assert r.epochs_trained == 0 and r.best_epoch == 0
    assert set(r.metrics) == {"train", "val", "test"}
    for a, b in zip(before, m.state()):
        np.testing.assert_array_equal(a, b)


def test_separable_node_task_reaches_full_validation_accuracy():
    ds = synthetic_node_task(150, 3, 1.0, 8, 0.0, seed=2, num_val=50)
    m = build_model(ArchitectureSpec(variant="standard", depth=2, hidden=8, num_heads=8, num_classes=3), 8, seed=0)
    r = train_run(m, ds, TrainConfig(epochs=200, lr=0.005, weight_decay=5e-4))
    assert r.metrics["val"] == 1.0


def test_training_is_deterministic():
    ds = _node_ds()
    spec = _spec(feature_dropout=0.5, attention_dropout=0.5)
    runs = [train_run(build_model(spec, 6, seed=3), ds, TrainConfig(epochs=15), seed=4) for _ in range(2)]
    assert runs[0].train_loss == runs[1].train_loss
    assert runs[0].metrics == runs[1].metrics


def test_checkpoint_at_best_restores_best_parameters():
    ds = _node_ds()
    m = build_model(_spec(), 6, seed=3)
    r = train_run(m, ds, TrainConfig(epochs=30, lr=0.01))
    from dsgnn.training import evaluate_model
    assert evaluate_model(m, ds) == r.metrics


def test_graph_training_never_touches_test_graphs():
    ds = synthetic_graph_task(30, seed=0)
    split = (np.arange(0, 18), np.arange(18, 24), np.arange(24, 30))
    m = build_model(ArchitectureSpec(task="graph", variant="dsgnn", depth=3, hidden=4, num_heads=2,
                                     num_classes=3, activation="relu"), 8)
    r = train_run(m, ds, TrainConfig(epochs=5, batch_size=4, optimizer="sgd", lr=0.01), split=split)
    np.testing.assert_array_equal(r.trained_indices, np.arange(18))


def test_graph_regression_training_reports_rmse():
    ds = synthetic_graph_task(30, "regression", seed=0)
    split = (np.arange(0, 20), np.arange(20, 25), np.arange(25, 30))
    m = build_model(ArchitectureSpec(task="graph", variant="jknet", depth=3, hidden=4, num_heads=2,
                                     regression=True, num_classes=1, activation="relu"), 8)
    r = train_run(m, ds, TrainConfig(epochs=10, batch_size=8, optimizer="sgd", lr=0.01), split=split)
    assert r.metric == "rmse" and all(np.isfinite(v) for v in r.metrics.values())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_flagged():
    ds = _node_ds()
    m = build_model(_spec(activation="relu"), 6, seed=0)
    r = train_run(m, ds, TrainConfig(epochs=20, optimizer="sgd", lr=1e200, momentum=0.0))
    assert r.diverged
    assert set(r.metrics) == {"train", "val", "test"}


def test_layer_diagnostics_cardinality():
    ds = _node_ds()
    m = build_model(_spec(depth=4), 6)
    assert [row[0] for row in layer_diagnostics(m, ds)] == [1, 2, 3]
    std = build_model(_spec(variant="standard", depth=2), 6)
    assert len(layer_diagnostics(std, ds)) == 2


def test_constant_features_give_zero_row_diff():
    base = _node_ds()
    ds = base.with_features(np.ones_like(base.graph.features))
    m = build_model(_spec(num_heads=1, hidden=3), 6, seed=2)
    assert layer_diagnostics(m, ds)[0][1] == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------- protocol


def test_mean_sd_sample_deviation():
    mean, sd = mean_sd([0.7, 0.8])
    assert mean == pytest.approx(0.75)
    assert sd == pytest.approx(0.07071067811865482, abs=1e-12)
    assert mean_sd([0.5]) == (0.5, 0.0)


def _record(gi, val, diverged=False):
    res = RunResult(config={}, train_loss=[], val_loss=[], metrics={"train": 1.0, "val": val, "test": 0.5},
                    metric="accuracy", best_epoch=0, epochs_trained=1, diverged=diverged)
    return RunRecord(RunTask(0, 0, gi, GridPoint(2, 0.01, 0.0, 0.0), 0), res)


def test_select_best_prefers_higher_val_then_earlier_index():
    assert select_best([_record(0, 0.70), _record(1, 0.72)], "accuracy").task.grid_index == 1
    assert select_best([_record(0, 0.72), _record(1, 0.72)], "accuracy").task.grid_index == 0
    assert select_best([_record(0, 0.9, diverged=True), _record(1, 0.1)], "accuracy").task.grid_index == 1
    rm = [_record(0, 0.3), _record(1, 0.2)]
    assert select_best(rm, "rmse").task.grid_index == 1


def test_cross_validate_counts_and_hygiene():
    ds = synthetic_graph_task(20, seed=0)
    cfg = TrainConfig(epochs=2, folds=2, repeats=1, optimizer="sgd", lr=0.01, batch_size=8)
    spec = ArchitectureSpec(task="graph", variant="dsgnn", depth=3, hidden=4, num_heads=1, activation="relu")
    report = cross_validate(ds, spec, cfg)
    assert len(report.records) == 2 and report.n_runs == 2
    for rec in report.records:
        assert not set(rec.result.trained_indices) & set(rec.task.split[2].tolist())
        assert not set(rec.result.trained_indices) & set(rec.task.split[1].tolist())
    tests = np.concatenate([rec.task.split[2] for rec in report.records])
    assert sorted(tests.tolist()) == list(range(20))


def test_repeat_fixed_splits_single_run():
    ds = _node_ds()
    report = repeat_fixed_splits(ds, _spec(), TrainConfig(epochs=3, repeats=1))
    assert len(report.records) == 1
    assert report.mean == report.records[0].result.metrics["test"]
    assert report.best_depth == 3


def test_repeat_fixed_splits_selects_best_mean_validation(monkeypatch):
    ds = _node_ds()
    vals = {0.01: 0.70, 0.02: 0.72}

    def fake_train(model, data, cfg, split=None, seed=None):
        return RunResult(config={}, train_loss=[], val_loss=[],
                         metrics={"train": 1.0, "val": vals[cfg.lr], "test": cfg.lr},
                         metric="accuracy", best_epoch=0, epochs_trained=0)

    monkeypatch.setattr(protocol, "train_run", fake_train)
    report = repeat_fixed_splits(ds, _spec(), TrainConfig(repeats=2, lr_grid=[0.01, 0.02]))
    assert report.mean == 0.02 and report.n_runs == 2


def test_missing_features_applied_in_every_run(monkeypatch):
    ds = _node_ds()
    seen = []

    def fake_train(model, data, cfg, split=None, seed=None):
        seen.append(data.graph.features.copy())
        return RunResult(config={}, train_loss=[], val_loss=[],
                         metrics={"train": 1.0, "val": 0.5, "test": 0.5},
                         metric="accuracy", best_epoch=0, epochs_trained=0)

    monkeypatch.setattr(protocol, "train_run", fake_train)
    repeat_fixed_splits(ds, _spec(), TrainConfig(repeats=3, missing_features=1.0))
    assert len(seen) == 3
    held_out = np.union1d(ds.val, ds.test)
    for feats in seen:
        assert np.all(feats[held_out] == 0)
        np.testing.assert_array_equal(feats[ds.train], ds.graph.features[ds.train])


def test_parallel_execution_matches_serial():
    ds = synthetic_graph_task(20, "regression", seed=1)
    cfg = TrainConfig(epochs=2, folds=2, repeats=1, optimizer="sgd", lr=0.01, batch_size=8, lr_grid=[0.01, 0.001])
    spec = ArchitectureSpec(task="graph", variant="standard", depth=2, hidden=4, num_heads=1, activation="relu")
    serial = cross_validate(ds, spec, cfg, jobs=1)
    parallel = cross_validate(ds, spec, cfg, jobs=2)
    assert serial.result_rows() == parallel.result_rows()
    assert serial.summary_row() == parallel.summary_row()
    assert math.isfinite(serial.mean)

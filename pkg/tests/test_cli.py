import csv
import json

import numpy as np
import pytest

from dsgnn.cli import main
from dsgnn.graph import load_graph_dataset, load_node_dataset, synthetic_node_task


def write_config(path, dataset=None, model=None, train=None, **extra):
    doc = {
        "schema_version": 1,
        "dataset": dataset or {"kind": "synthetic_node",
                               "params": {"num_nodes": 60, "num_classes": 3, "feature_dim": 5,
                                          "seed": 1, "num_val": 20}},
        "model": {"variant": "dsgnn", "depth": 3, "hidden": 4, "num_heads": 2, **(model or {})},
        "train": {"epochs": 5, **(train or {})},
        "output_dir": str(path.parent / "out"),
        **extra,
    }
    path.write_text(json.dumps(doc))
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_synthetic_node_is_deterministic_and_round_trips(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-synthetic", "--kind", "node", "--seed", "7", "--num-nodes", "50",
                     "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert "nodes=50" in capsys.readouterr().out

    loaded = load_node_dataset(tmp_path / "a")
    direct = synthetic_node_task(50, 3, 0.9, 16, 1.0, 7)
    np.testing.assert_array_equal(loaded.graph.features, direct.graph.features)
    np.testing.assert_array_equal(loaded.labels, direct.labels)
    np.testing.assert_array_equal(loaded.graph.edge_list(), direct.graph.edge_list())
    np.testing.assert_array_equal(loaded.test, direct.test)


def test_gen_synthetic_graph_line_count(tmp_path):
    out = tmp_path / "graphs.jsonl"
    assert main(["gen-synthetic", "--kind", "graph", "--num-graphs", "60", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 61
    assert len(load_graph_dataset(out)) == 60


def test_train_writes_outputs(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    rows = read_rows(out / "results.csv")
    assert [r["split"] for r in rows] == ["train", "val", "test"]
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["train"]["lr"] == 0.005 and resolved["model"]["num_classes"] == 3
    assert (out / "model.json").exists() and (out / "model.bin").exists()


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", lrr=0.1)
    assert main(["train", "--config", cfg]) == 1
    assert "/lrr" in capsys.readouterr().err


def test_nested_type_error_names_pointer(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", train={"epochs": "many"})
    assert main(["train", "--config", cfg]) == 1
    assert "/train/epochs" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1


def test_train_rerun_is_deterministic(tmp_path):
    cfg = write_config(tmp_path / "c.json", model={"feature_dropout": 0.5, "attention_dropout": 0.5})
    for name in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_seed_environment_override(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.json")
    monkeypatch.setenv("DSGNN_SEED", "5")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
    resolved = json.loads((tmp_path / "run" / "resolved_config.json").read_text())
    assert resolved["train"]["seed"] == 5


def test_divergence_exit_code(tmp_path):
    cfg = write_config(tmp_path / "c.json", model={"activation": "relu"},
                       train={"optimizer": "sgd", "lr": 1e200, "momentum": 0.0, "epochs": 20})
    with np.errstate(all="ignore"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 2


@pytest.mark.parametrize("dataset", ["node", "graph"])
def test_eval_matches_recorded_test_value(tmp_path, capsys, dataset):
    block = None
    if dataset == "graph":
        block = {"kind": "synthetic_graph", "params": {"num_graphs": 30, "task": "regression", "seed": 2}}
    cfg = write_config(tmp_path / "c.json", dataset=block, train={"folds": 3, "batch_size": 8})
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    recorded = {r["split"]: float(r["value"]) for r in read_rows(out / "results.csv")}
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "model.json"), "--split", "test", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["metric"] == ("rmse" if dataset == "graph" else "accuracy")
    assert doc["value"] == recorded["test"]


def test_eval_on_perfectly_fit_toy_model(tmp_path, capsys):
    block = {"kind": "synthetic_node",
             "params": {"num_nodes": 90, "num_classes": 3, "homophily": 1.0, "noise": 0.0,
                        "feature_dim": 6, "seed": 0, "num_val": 30}}
    cfg = write_config(tmp_path / "c.json", dataset=block, model={"variant": "standard", "depth": 2},
                       train={"epochs": 100, "lr": 0.01})
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "model.json"), "--split", "train"]) == 0
    assert capsys.readouterr().out.strip() == "accuracy 1.0"


def test_eval_rejects_unknown_split(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    assert main(["eval", "--checkpoint", str(out / "model.json"), "--split", "holdout"]) == 1


def test_export_embeddings(tmp_path):
    cfg = write_config(tmp_path / "c.json", model={"depth": 4})
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    for name in ("e1", "e2"):
        assert main(["export-embeddings", "--checkpoint", str(out / "model.json"),
                     "--out", str(tmp_path / name)]) == 0
    layers = sorted(p.name for p in (tmp_path / "e1").glob("layer_*.tsv"))
    assert layers == ["layer_1.tsv", "layer_2.tsv", "layer_3.tsv"]
    for name in layers:
        text = (tmp_path / "e1" / name).read_text()
        assert text == (tmp_path / "e2" / name).read_text()
        lines = text.splitlines()
        assert len(lines) == 60
        assert len(lines[0].split("\t")) == 2 + 8
    assert len(read_rows(tmp_path / "e1" / "diagnostics.csv")) == 3


def test_export_deep_checkpoint_file_count(tmp_path):
    cfg = write_config(tmp_path / "c.json", model={"depth": 25, "hidden": 2, "num_heads": 1},
                       train={"epochs": 0})
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    assert main(["export-embeddings", "--checkpoint", str(out / "model.json"), "--out", str(tmp_path / "e")]) == 0
    assert len(list((tmp_path / "e").glob("layer_*.tsv"))) == 24


def test_export_rejects_mismatched_dataset(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    assert main(["gen-synthetic", "--kind", "node", "--num-nodes", "30", "--feature-dim", "3",
                 "--out", str(tmp_path / "other")]) == 0
    assert main(["export-embeddings", "--checkpoint", str(out / "model.json"),
                 "--dataset", str(tmp_path / "other"), "--out", str(tmp_path / "e")]) == 1


def test_sweep_single_run_summary(tmp_path):
    cfg = write_config(tmp_path / "c.json", train={"repeats": 1})
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", cfg, "--out", str(out)]) == 0
    runs = [r for r in read_rows(out / "results.csv") if r["split"] == "test"]
    summary = read_rows(out / "summary.csv")[0]
    assert len(runs) == 1
    assert float(summary["mean"]) == float(runs[0]["value"])
    assert float(summary["sd"]) == 0.0


def test_sweep_reports_best_depth_in_brackets(tmp_path):
    cfg = write_config(tmp_path / "c.json", train={"repeats": 2, "depth_grid": [2, 4]})
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", cfg, "--out", str(out)]) == 0
    summary = read_rows(out / "summary.csv")[0]
    assert summary["best_depth"] in ("2", "4")
    assert summary["cell"].endswith(f"[{summary['best_depth']}]")
    assert f"[{summary['best_depth']}]" in (out / "summary.txt").read_text()
    assert {r["depth"] for r in read_rows(out / "depth_curve.csv")} == {"2", "4"}


def test_sweep_jobs_do_not_change_results(tmp_path):
    block = {"kind": "synthetic_graph", "params": {"num_graphs": 24, "seed": 0}}
    cfg = write_config(tmp_path / "c.json", dataset=block,
                       train={"folds": 2, "repeats": 1, "epochs": 2, "lr_grid": [0.01, 0.001]})
    for jobs in ("1", "2"):
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path / jobs), "--jobs", jobs]) == 0
    for name in ("summary.csv", "results.csv"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "2" / name).read_bytes()

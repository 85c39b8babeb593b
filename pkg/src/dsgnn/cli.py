"""Command-line entry point: gen-synthetic, train, sweep, eval, export-embeddings.

Exit codes: 0 success, 1 usage or config error, 2 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, DatasetConfig, load_config, load_dataset, resolve_model_spec
from .graph import (
    DatasetError,
    GraphDataset,
    NodeDataset,
    make_folds,
    save_graph_dataset,
    save_node_dataset,
    synthetic_graph_task,
    synthetic_node_task,
)
from .models import build_model, forward_graph, forward_node, load_checkpoint, save_checkpoint
from .protocol import (
    RESULT_COLUMNS,
    SUMMARY_COLUMNS,
    cross_validate,
    prepare_node_data,
    repeat_fixed_splits,
    run_seed,
)
from .training import TrainConfig, evaluate_model, layer_diagnostics, train_run
from . import autodiff as ad

log = logging.getLogger("dsgnn")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _write_csv(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _prepare(data, cfg: TrainConfig):
    """Dataset-level preprocessing shared by train, eval and export."""
    if isinstance(data, NodeDataset):
        return prepare_node_data(data, cfg, 0), None
    labels = data.targets if data.task == "classification" else None
    plan = make_folds(len(data), cfg.folds, labels, seed=run_seed(cfg.seed, 0))
    return data, plan.folds[0]


# ---------------------------------------------------------------- commands


def cmd_gen_synthetic(args) -> int:
    out = Path(args.out)
    if args.kind == "node":
        ds = synthetic_node_task(args.num_nodes, args.num_classes, args.homophily, args.feature_dim,
                                 args.noise, args.seed, avg_degree=args.avg_degree)
        save_node_dataset(ds, out)
        print(f"nodes={ds.graph.num_nodes} edges={len(ds.graph.edge_list())} classes={ds.num_classes} "
              f"features={ds.graph.feature_dim} train/val/test={ds.train.size}/{ds.val.size}/{ds.test.size}")
    else:
        ds = synthetic_graph_task(args.num_graphs, args.task, args.seed, feature_dim=args.feature_dim)
        save_graph_dataset(ds, out)
        avg = np.mean([g.num_nodes for g in ds.graphs])
        print(f"graphs={len(ds)} nodes={avg:.1f} (avg) classes={ds.num_classes if ds.task == 'classification' else '-'} "
              f"features={ds.feature_dim} task={ds.task}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    data = load_dataset(cfg.dataset)
    spec = resolve_model_spec(cfg.model, data)
    data, split = _prepare(data, cfg.train)
    input_dim = data.graph.feature_dim if isinstance(data, NodeDataset) else data.feature_dim
    seed = run_seed(cfg.train.seed, 0, 0)
    model = build_model(spec, input_dim, seed=seed)
    result = train_run(model, data, cfg.train, split=split, seed=seed)

    resolved = replace(cfg, model=spec, output_dir=str(out)).to_dict()
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    extra = {"dataset": asdict(cfg.dataset), "train": asdict(cfg.train)}
    if split is not None:
        extra["split"] = {k: v.tolist() for k, v in zip(("train", "val", "test"), split)}
    save_checkpoint(model, out / "model", extra)
    rows = [{
        "run_id": "r0-f0-g0", "variant": spec.variant, "pairnorm": int(spec.pairnorm), "depth": spec.depth,
        "seed": seed, "fold": 0, "repeat": 0, "lr": repr(cfg.train.lr),
        "weight_decay": repr(cfg.train.weight_decay), "dropout": repr(spec.feature_dropout),
        "split": s, "metric": result.metric, "value": repr(result.metrics[s]),
        "epochs_trained": result.epochs_trained, "diverged": int(result.diverged),
    } for s in ("train", "val", "test")]
    _write_csv(out / "results.csv", RESULT_COLUMNS, rows)
    print(" ".join(f"{s}_{result.metric}={result.metrics[s]:.4f}" for s in ("train", "val", "test"))
          + f" best_epoch={result.best_epoch}")
    if result.diverged:
        print("training diverged (non-finite loss)", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    data = load_dataset(cfg.dataset)
    spec = resolve_model_spec(cfg.model, data)
    if isinstance(data, GraphDataset):
        report = cross_validate(data, spec, cfg.train, jobs=args.jobs)
    else:
        report = repeat_fixed_splits(data, spec, cfg.train, jobs=args.jobs)
    _write_csv(out / "results.csv", RESULT_COLUMNS, report.result_rows())
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, [report.summary_row()])
    _write_csv(out / "depth_curve.csv", ("depth", "mean", "sd", "n"),
               [{"depth": d, "mean": repr(m), "sd": repr(s), "n": n} for d, m, s, n in report.depth_curve])
    name = spec.variant.upper() if spec.variant != "standard" else "GNN"
    if spec.pairnorm:
        name += "-PN"
    text = f"{'Model':<10}{report.metric}\n{name:<10}{report.cell()}\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    if report.n_diverged:
        print(f"{report.n_diverged} diverged run(s) excluded", file=sys.stderr)
    return EXIT_OK


def _checkpoint_data(args):
    model, manifest = load_checkpoint(args.checkpoint)
    block = DatasetConfig(**manifest["dataset"])
    train_cfg = TrainConfig(**manifest["train"])
    data = load_dataset(block, args.dataset)
    if isinstance(data, NodeDataset) != (model.spec.task == "node"):
        raise UsageError("checkpoint task does not match the dataset type")
    expected = data.graph.feature_dim if isinstance(data, NodeDataset) else data.feature_dim
    if expected != model.input_dim:
        raise UsageError(f"dataset feature width {expected} does not match checkpoint input {model.input_dim}")
    if isinstance(data, NodeDataset):
        data = prepare_node_data(data, train_cfg, 0)
        split = None
    else:
        split = tuple(np.asarray(manifest["split"][s], dtype=np.int64) for s in ("train", "val", "test"))
    return model, data, split, train_cfg


def cmd_eval(args) -> int:
    model, data, split, train_cfg = _checkpoint_data(args)
    if args.split not in ("train", "val", "test"):
        raise UsageError(f"unknown split {args.split!r}")
    metrics = evaluate_model(model, data, split, train_cfg)
    metric = "rmse" if model.spec.regression else "accuracy"
    value = metrics[args.split]
    if args.json:
        print(json.dumps({"metric": metric, "split": args.split, "value": value}))
    else:
        print(f"{metric} {value!r}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model, data, _, _ = _checkpoint_data(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ad.no_grad():
        if isinstance(data, NodeDataset):
            trace = forward_node(model, data, training=False)
            labels = data.labels
        else:
            trace = forward_graph(model, data, training=False)
            labels = np.repeat(data.targets, [g.num_nodes for g in data.graphs])
    width = len(str(len(trace.hidden)))
    for i, h in enumerate(trace.hidden, 1):
        lines = []
        for node, (label, row) in enumerate(zip(labels, h.values)):
            lines.append("\t".join([str(node), str(label)] + [repr(float(x)) for x in row]))
        (out / f"layer_{i:0{width}d}.tsv").write_text("\n".join(lines) + "\n")
    rows = [{"layer": layer, "row_diff": repr(rd), "col_diff": repr(cd)}
            for layer, rd, cd in layer_diagnostics(model, data)]
    _write_csv(out / "diagnostics.csv", ("layer", "row_diff", "col_diff"), rows)
    print(f"wrote {len(trace.hidden)} layer files to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsgnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    gen.add_argument("--kind", choices=("node", "graph"), required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--num-nodes", type=int, default=600)
    gen.add_argument("--num-classes", type=int, default=3)
    gen.add_argument("--homophily", type=float, default=0.9)
    gen.add_argument("--feature-dim", type=int, default=None)
    gen.add_argument("--noise", type=float, default=1.0)
    gen.add_argument("--avg-degree", type=float, default=6.0)
    gen.add_argument("--num-graphs", type=int, default=120)
    gen.add_argument("--task", choices=("classification", "regression"), default="classification")
    gen.set_defaults(func=cmd_gen_synthetic)

    train = sub.add_parser("train", help="train one model from a config")
    train.add_argument("--config", required=True)
    train.add_argument("--out")
    train.set_defaults(func=cmd_train)

    sweep = sub.add_parser("sweep", help="grid search with repeats / cross validation")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--out")
    sweep.add_argument("--jobs", type=int, default=1)
    sweep.set_defaults(func=cmd_sweep)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset")
    ev.add_argument("--split", default="test")
    ev.add_argument("--json", action="store_true")
    ev.set_defaults(func=cmd_eval)

    exp = sub.add_parser("export-embeddings", help="per-layer embeddings and over-smoothing diagnostics")
    exp.add_argument("--checkpoint", required=True)
    exp.add_argument("--dataset")
    exp.add_argument("--out", required=True)
    exp.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "kind", None) and args.feature_dim is None:
        args.feature_dim = 16 if args.kind == "node" else 8
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except (DatasetError, UsageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

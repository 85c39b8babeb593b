"""Evaluation protocols: k-fold CV on graph datasets, repeated fixed splits on
node datasets, grid search and result aggregation.

Each run is identified by (repeat, fold, grid index) and seeded from the
master seed and those coordinates, so serial and parallel sweeps agree.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .graph import GraphDataset, NodeDataset, make_folds, zero_features
from .models import ArchitectureSpec, build_model
from .training import RunResult, TrainConfig, train_run

RESULT_COLUMNS = ("run_id", "variant", "pairnorm", "depth", "seed", "fold", "repeat", "lr",
                  "weight_decay", "dropout", "split", "metric", "value", "epochs_trained", "diverged")
SUMMARY_COLUMNS = ("variant", "pairnorm", "metric", "mean", "sd", "best_depth", "n_runs", "n_diverged", "cell")


def run_seed(master: int, *coords: int) -> int:
    return int(np.random.SeedSequence([master, *coords]).generate_state(1)[0])


@dataclass(frozen=True)
class GridPoint:
    depth: int
    lr: float
    weight_decay: float
    dropout: float


def grid_points(spec: ArchitectureSpec, cfg: TrainConfig) -> list[GridPoint]:
    depths = cfg.depth_grid or [spec.depth]
    lrs = cfg.lr_grid or [cfg.lr]
    wds = cfg.weight_decay_grid or [cfg.weight_decay]
    drops = cfg.dropout_grid or [spec.feature_dropout]
    return [GridPoint(*p) for p in itertools.product(depths, lrs, wds, drops)]


@dataclass(frozen=True)
class RunTask:
    repeat: int
    fold: int
    grid_index: int
    point: GridPoint
    seed: int
    split: tuple | None = None


@dataclass
class RunRecord:
    task: RunTask
    result: RunResult


def apply_point(spec: ArchitectureSpec, cfg: TrainConfig, point: GridPoint):
    spec = replace(spec, depth=point.depth, feature_dropout=point.dropout, attention_dropout=point.dropout)
    cfg = replace(cfg, lr=point.lr, weight_decay=point.weight_decay)
    return spec, cfg


def prepare_node_data(ds: NodeDataset, cfg: TrainConfig, repeat: int) -> NodeDataset:
    if cfg.missing_features > 0:
        return zero_features(ds, cfg.missing_features, run_seed(cfg.seed, repeat, 7))
    return ds


_WORKER_STATE: dict = {}


def _init_worker(data, spec, cfg):
    _WORKER_STATE.update(data=data, spec=spec, cfg=cfg)


def _execute(task: RunTask, data=None, spec=None, cfg=None) -> RunRecord:
    data = _WORKER_STATE["data"] if data is None else data
    spec = _WORKER_STATE["spec"] if spec is None else spec
    cfg = _WORKER_STATE["cfg"] if cfg is None else cfg
    run_spec, run_cfg = apply_point(spec, cfg, task.point)
    if isinstance(data, NodeDataset):
        data = prepare_node_data(data, run_cfg, task.repeat)
        input_dim = data.graph.feature_dim
    else:
        input_dim = data.feature_dim
    model = build_model(run_spec, input_dim, seed=task.seed)
    result = train_run(model, data, run_cfg, split=task.split, seed=task.seed)
    return RunRecord(task=task, result=result)


def execute(tasks: list[RunTask], data, spec, cfg, jobs: int = 1) -> list[RunRecord]:
    """Run tasks, at most ``jobs`` at a time; output order follows ``tasks``."""
    if jobs <= 1 or len(tasks) <= 1:
        return [_execute(t, data, spec, cfg) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(data, spec, cfg)) as pool:
        return list(pool.map(_execute, tasks))


# ---------------------------------------------------------------- aggregation


@dataclass
class SweepReport:
    records: list[RunRecord]
    metric: str
    mean: float
    sd: float
    best_depth: int
    n_runs: int
    n_diverged: int
    variant: str
    pairnorm: bool
    selected: list[RunRecord]
    depth_curve: list[tuple[int, float, float, int]]

    def cell(self) -> str:
        if self.metric == "accuracy":
            return f"{100 * self.mean:.1f} ({100 * self.sd:.1f}) [{self.best_depth}]"
        return f"{self.mean:.3f} ({self.sd:.3f}) [{self.best_depth}]"

    def summary_row(self) -> dict:
        return {
            "variant": self.variant, "pairnorm": int(self.pairnorm), "metric": self.metric,
            "mean": repr(self.mean), "sd": repr(self.sd), "best_depth": self.best_depth,
            "n_runs": self.n_runs, "n_diverged": self.n_diverged, "cell": self.cell(),
        }

    def result_rows(self) -> list[dict]:
        rows = []
        for rec in self.records:
            t, r = rec.task, rec.result
            for split in ("train", "val", "test"):
                rows.append({
                    "run_id": f"r{t.repeat}-f{t.fold}-g{t.grid_index}",
                    "variant": self.variant, "pairnorm": int(self.pairnorm), "depth": t.point.depth,
                    "seed": t.seed, "fold": t.fold, "repeat": t.repeat, "lr": repr(t.point.lr),
                    "weight_decay": repr(t.point.weight_decay), "dropout": repr(t.point.dropout),
                    "split": split, "metric": r.metric, "value": repr(r.metrics[split]),
                    "epochs_trained": r.epochs_trained, "diverged": int(r.diverged),
                })
        return rows


def mean_sd(values) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; sd is 0 for one value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan")
    sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), sd


def _val_key(metric: str, value: float) -> float:
    return -value if metric == "rmse" else value


def select_best(records: list[RunRecord], metric: str) -> RunRecord | None:
    """Best validation metric; ties go to the earliest grid index."""
    best = None
    for rec in sorted(records, key=lambda r: r.task.grid_index):
        if rec.result.diverged or not math.isfinite(rec.result.metrics["val"]):
            continue
        if best is None or _val_key(metric, rec.result.metrics["val"]) > _val_key(metric, best.result.metrics["val"]):
            best = rec
    return best


def _depth_curve(records, metric, group_key):
    """Per depth: pick the best grid point per group by val, aggregate test."""
    curve = []
    for depth in sorted({r.task.point.depth for r in records}):
        groups: dict = {}
        for r in records:
            if r.task.point.depth == depth:
                groups.setdefault(group_key(r), []).append(r)
        tests = [b.result.metrics["test"] for g in groups.values() if (b := select_best(g, metric))]
        mean, sd = mean_sd(tests)
        curve.append((depth, mean, sd, len(tests)))
    return curve


def cross_validate(dataset: GraphDataset, spec: ArchitectureSpec, cfg: TrainConfig, jobs: int = 1) -> SweepReport:
    """Repeated k-fold CV with a grid search inside every fold."""
    if cfg.folds < 2:
        raise ValueError("cross validation needs folds >= 2")
    spec = replace(spec, task="graph", regression=dataset.task == "regression",
                   num_classes=max(dataset.num_classes, 2) if dataset.task == "classification" else spec.num_classes)
    labels = dataset.targets if dataset.task == "classification" else None
    points = grid_points(spec, cfg)
    tasks = []
    for r in range(cfg.repeats):
        plan = make_folds(len(dataset), cfg.folds, labels, seed=run_seed(cfg.seed, r))
        for k, split in enumerate(plan):
            seed = run_seed(cfg.seed, r, k)
            tasks.extend(RunTask(r, k, gi, p, seed, split) for gi, p in enumerate(points))
    records = execute(tasks, dataset, spec, cfg, jobs)
    metric = records[0].result.metric
    by_fold: dict = {}
    for rec in records:
        by_fold.setdefault((rec.task.repeat, rec.task.fold), []).append(rec)
    selected = [b for recs in by_fold.values() if (b := select_best(recs, metric))]
    mean, sd = mean_sd([s.result.metrics["test"] for s in selected])
    depths = Counter(s.task.point.depth for s in selected)
    best_depth = min(depths, key=lambda d: (-depths[d], d)) if depths else spec.depth
    return SweepReport(
        records=records, metric=metric, mean=mean, sd=sd, best_depth=best_depth,
        n_runs=len(selected), n_diverged=sum(r.result.diverged for r in records),
        variant=spec.variant, pairnorm=spec.pairnorm, selected=selected,
        depth_curve=_depth_curve(records, metric, lambda r: (r.task.repeat, r.task.fold)),
    )


def repeat_fixed_splits(dataset: NodeDataset, spec: ArchitectureSpec, cfg: TrainConfig, jobs: int = 1) -> SweepReport:
    """Grid search by mean validation accuracy over ``repeats`` seeds.

    One configuration is chosen for all repeats; its test accuracies are
    aggregated.
    """
    spec = replace(spec, task="node", num_classes=max(dataset.num_classes, spec.num_classes))
    points = grid_points(spec, cfg)
    tasks = [RunTask(r, 0, gi, p, run_seed(cfg.seed, r, 0))
             for gi, p in enumerate(points) for r in range(cfg.repeats)]
    records = execute(tasks, dataset, spec, cfg, jobs)
    metric = records[0].result.metric
    best_gi, best_val = None, -math.inf
    for gi in range(len(points)):
        ok = [r for r in records if r.task.grid_index == gi and not r.result.diverged]
        if not ok:
            continue
        val = float(np.mean([r.result.metrics["val"] for r in ok]))
        if val > best_val:
            best_gi, best_val = gi, val
    selected = [r for r in records if r.task.grid_index == best_gi and not r.result.diverged]
    mean, sd = mean_sd([r.result.metrics["test"] for r in selected])
    curve = []
    for depth in sorted({p.depth for p in points}):
        cands = [gi for gi, p in enumerate(points) if p.depth == depth]
        scored = []
        for gi in cands:
            ok = [r for r in records if r.task.grid_index == gi and not r.result.diverged]
            if ok:
                scored.append((float(np.mean([r.result.metrics["val"] for r in ok])), -gi, ok))
        if scored:
            _, _, ok = max(scored, key=lambda s: (s[0], s[1]))
            m, s = mean_sd([r.result.metrics["test"] for r in ok])
            curve.append((depth, m, s, len(ok)))
    return SweepReport(
        records=records, metric=metric, mean=mean, sd=sd,
        best_depth=points[best_gi].depth if best_gi is not None else spec.depth,
        n_runs=len(selected), n_diverged=sum(r.result.diverged for r in records),
        variant=spec.variant, pairnorm=spec.pairnorm, selected=selected, depth_curve=curve,
    )

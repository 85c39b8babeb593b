"""Depth studies on the synthetic node task: accuracy and smoothness per depth."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import synthetic_node_task
from .models import ArchitectureSpec, build_model
from .protocol import mean_sd, run_seed
from .training import TrainConfig, train_run

DEFAULT_SETTINGS = (("standard", 2), ("standard", 16), ("dsgnn", 16))


@dataclass
class StudyConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    settings: tuple = DEFAULT_SETTINGS
    dataset: dict = field(default_factory=lambda: dict(num_nodes=600, num_classes=3, homophily=0.9, noise=1.0))
    model: ArchitectureSpec = field(default_factory=lambda: ArchitectureSpec(
        hidden=8, num_heads=8, activation="elu", feature_dropout=0.5, attention_dropout=0.5))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=200, lr=0.005, weight_decay=5e-4))


@dataclass
class StudyRun:
    variant: str
    depth: int
    seed: int
    test_accuracy: float
    val_accuracy: float
    best_epoch: int
    diagnostics: list

    @property
    def last_row_diff(self) -> float:
        return self.diagnostics[-1][1]


def _one(args) -> StudyRun:
    variant, depth, seed, study = args
    ds = synthetic_node_task(seed=seed, **study.dataset)
    spec = replace(study.model, variant=variant, depth=depth, num_classes=ds.num_classes)
    model_seed = run_seed(seed, 0, 0)
    model = build_model(spec, ds.graph.feature_dim, seed=model_seed)
    r = train_run(model, ds, study.train, seed=model_seed)
    return StudyRun(variant, depth, seed, r.metrics["test"], r.metrics["val"], r.best_epoch, r.diagnostics)


def run_study(study: StudyConfig | None = None, jobs: int = 1) -> list[StudyRun]:
    """Train every (setting, seed) pair; result order is settings-major."""
    study = study or StudyConfig()
    work = [(v, d, s, study) for v, d in study.settings for s in study.seeds]
    if jobs <= 1:
        return [_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_one, work))


def summarize(runs: list[StudyRun]) -> dict[tuple[str, int], dict[str, float]]:
    out = {}
    for key in dict.fromkeys((r.variant, r.depth) for r in runs):
        group = [r for r in runs if (r.variant, r.depth) == key]
        acc_mean, acc_sd = mean_sd([r.test_accuracy for r in group])
        out[key] = {
            "test_mean": acc_mean,
            "test_sd": acc_sd,
            "last_row_diff": float(np.mean([r.last_row_diff for r in group])),
            "n": len(group),
        }
    return out

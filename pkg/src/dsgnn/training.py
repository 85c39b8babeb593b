"""Optimizers, learning-rate schedule and the single-run training loop."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphDataset, NodeDataset
from .metrics import accuracy, col_diff, rmse, row_diff
from .models import Model, ds_total_loss, forward_graph, forward_node, predict

SPLITS = ("train", "val", "test")


@dataclass
class TrainConfig:
    epochs: int = 200
    optimizer: str = "adam"            # adam | sgd
    lr: float = 0.005
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 64
    lr_decay_factor: float = 0.5
    lr_decay_period: int = 250         # 0 disables decay
    loss_reduction: str = "mean"
    seed: int = 0
    repeats: int = 1
    folds: int = 10
    missing_features: float = 0.0
    lr_grid: list = field(default_factory=list)
    weight_decay_grid: list = field(default_factory=list)
    dropout_grid: list = field(default_factory=list)
    depth_grid: list = field(default_factory=list)

    def validate(self) -> None:
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if any(d < 2 for d in self.depth_grid):
            raise ValueError("depth candidates must be >= 2")
        if not 0.0 <= self.missing_features <= 1.0:
            raise ValueError("missing_features must be in [0, 1]")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown loss_reduction {self.loss_reduction!r}")


# ---------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 0.01
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(state: OptimizerState, params: list[Tensor]) -> None:
    """One update from the populated ``grad`` of every parameter; grads are cleared."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} ({p.name}) has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.values) for p in params]
        state.v = [np.zeros_like(p.values) for p in params]
    state.step_count += 1
    t = state.step_count
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad + state.weight_decay * p.values
        if state.kind == "sgd":
            m *= state.momentum
            m += g
            p.values -= state.lr * m
        elif state.kind == "adam":
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * g * g
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            p.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            raise ValueError(f"unknown optimizer {state.kind!r}")
        p.grad = None


def lr_at(base: float, epoch: int, factor: float = 0.5, period: int = 250) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if period <= 0:
        return base
    return base * factor ** (epoch // period)


# ---------------------------------------------------------------- training


@dataclass
class RunResult:
    config: dict
    train_loss: list[float]
    val_loss: list[float]
    metrics: dict[str, float]
    metric: str
    best_epoch: int
    epochs_trained: int
    diverged: bool = False
    wall_clock: float = 0.0
    trained_indices: np.ndarray | None = None
    diagnostics: list | None = None
    checkpoint: str | None = None


def _metric_name(model: Model) -> str:
    return "rmse" if model.spec.regression else "accuracy"


def _better(metric: str, a: float, b: float) -> bool:
    return a < b if metric == "rmse" else a > b


class _NodeTask:
    def __init__(self, model: Model, ds: NodeDataset):
        self.model, self.ds = model, ds
        self.splits = {s: ds.split(s) for s in SPLITS}

    def epoch(self, cfg, opt, rng, shuffle_rng):
        ad.active_tape().clear()
        trace = forward_node(self.model, self.ds, training=True, rng=rng)
        loss, _ = ds_total_loss(trace, self.ds.labels, self.splits["train"], reduction=cfg.loss_reduction)
        value = loss.item()
        if not math.isfinite(value):
            ad.active_tape().clear()
            return value
        ad.backward(loss)
        optimizer_step(opt, self.model.parameters())
        return value

    def evaluate(self, cfg):
        with ad.no_grad():
            trace = forward_node(self.model, self.ds, training=False)
            pred = predict(self.model, trace)
            metrics = {s: accuracy(pred, self.ds.labels, idx) for s, idx in self.splits.items()}
            val_loss, _ = ds_total_loss(trace, self.ds.labels, self.splits["val"], reduction=cfg.loss_reduction)
        return metrics, val_loss.item()

    def trained_indices(self):
        return np.asarray(self.splits["train"])


class _GraphTask:
    eval_chunk = 256

    def __init__(self, model: Model, ds: GraphDataset, split):
        self.model, self.ds = model, ds
        self.splits = dict(zip(SPLITS, (np.asarray(s, dtype=np.int64) for s in split)))
        self.regression = ds.task == "regression"
        self.seen: set[int] = set()

    def epoch(self, cfg, opt, rng, shuffle_rng):
        order = shuffle_rng.permutation(self.splits["train"])
        losses = []
        for lo in range(0, order.size, cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            self.seen.update(batch.tolist())
            ad.active_tape().clear()
            trace = forward_graph(self.model, self.ds.subset(batch), training=True, rng=rng)
            loss, _ = ds_total_loss(trace, self.ds.targets[batch], None, regression=self.regression,
                                    reduction=cfg.loss_reduction)
            value = loss.item()
            if not math.isfinite(value):
                ad.active_tape().clear()
                return value
            ad.backward(loss)
            optimizer_step(opt, self.model.parameters())
            losses.append(value * batch.size)
        return float(np.sum(losses) / max(order.size, 1))

    def outputs(self, idx):
        """Per-output-layer values for the graphs ``idx`` (eval mode)."""
        chunks = []
        with ad.no_grad():
            for lo in range(0, idx.size, self.eval_chunk):
                part = idx[lo:lo + self.eval_chunk]
                chunks.append(forward_graph(self.model, self.ds.subset(part), training=False))
        return chunks

    def evaluate(self, cfg):
        metrics, val_loss = {}, float("nan")
        for s, idx in self.splits.items():
            if idx.size == 0:
                metrics[s] = float("nan")
                continue
            chunks = self.outputs(idx)
            pred = np.concatenate([predict(self.model, tr) for tr in chunks])
            y = self.ds.targets[idx]
            metrics[s] = rmse(pred, y) if self.regression else accuracy(pred, y)
            if s == "val":
                with ad.no_grad():
                    total, pos = 0.0, 0
                    for tr in chunks:
                        n = tr.logits[0].shape[0]
                        loss, _ = ds_total_loss(tr, y[pos:pos + n], None, regression=self.regression,
                                                reduction="sum")
                        total += loss.item()
                        pos += n
                val_loss = total / idx.size
        return metrics, val_loss

    def trained_indices(self):
        return np.array(sorted(self.seen), dtype=np.int64)


def train_run(model: Model, data, cfg: TrainConfig, split=None, seed: int | None = None) -> RunResult:
    """Train ``model`` in place and restore the best-validation parameters.

    Node datasets train full-batch on their fixed splits. Graph datasets need
    ``split = (train_idx, val_idx, test_idx)`` and train on shuffled
    mini-batches of training graphs only.
    """
    cfg.validate()
    started = time.perf_counter()
    seed = cfg.seed if seed is None else seed
    dropout_ss, shuffle_ss = np.random.SeedSequence([seed, 1]), np.random.SeedSequence([seed, 2])
    rng, shuffle_rng = np.random.default_rng(dropout_ss), np.random.default_rng(shuffle_ss)
    if isinstance(data, NodeDataset):
        task = _NodeTask(model, data)
    else:
        if split is None:
            raise ValueError("graph datasets need an explicit (train, val, test) split")
        task = _GraphTask(model, data, split)
    metric = _metric_name(model)
    opt = OptimizerState(kind=cfg.optimizer, lr=cfg.lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum)

    metrics, val_loss = task.evaluate(cfg)
    best = (metrics, val_loss, 0, model.state())
    train_losses, val_losses = [], [val_loss]
    diverged = False
    epochs_done = 0
    for epoch in range(cfg.epochs):
        opt.lr = lr_at(cfg.lr, epoch, cfg.lr_decay_factor, cfg.lr_decay_period)
        loss = task.epoch(cfg, opt, rng, shuffle_rng)
        if not math.isfinite(loss):
            diverged = True
            break
        epochs_done = epoch + 1
        train_losses.append(loss)
        metrics, val_loss = task.evaluate(cfg)
        val_losses.append(val_loss)
        if not math.isfinite(val_loss):
            diverged = True
            break
        b_metrics, b_loss = best[0], best[1]
        if _better(metric, metrics["val"], b_metrics["val"]) or (
                metrics["val"] == b_metrics["val"] and val_loss < b_loss):
            best = (metrics, val_loss, epoch + 1, model.state())

    model.load_state(best[3])
    return RunResult(
        config={"model": asdict(model.spec), "train": asdict(cfg), "seed": seed},
        train_loss=train_losses,
        val_loss=val_losses,
        metrics=dict(best[0]),
        metric=metric,
        best_epoch=best[2],
        epochs_trained=epochs_done,
        diverged=diverged,
        wall_clock=time.perf_counter() - started,
        trained_indices=task.trained_indices(),
        diagnostics=layer_diagnostics(model, data) if isinstance(data, NodeDataset) else None,
    )


def evaluate_model(model: Model, data, split=None, cfg: TrainConfig | None = None) -> dict[str, float]:
    """Metrics of the current parameters on every split."""
    cfg = cfg or TrainConfig()
    task = _NodeTask(model, data) if isinstance(data, NodeDataset) else _GraphTask(model, data, split)
    return task.evaluate(cfg)[0]


def layer_diagnostics(model: Model, data) -> list[tuple[int, float, float]]:
    """(layer, row_diff, col_diff) for every attention layer's output."""
    with ad.no_grad():
        if isinstance(data, NodeDataset):
            trace = forward_node(model, data, training=False)
        else:
            trace = forward_graph(model, data, training=False)
    rows = []
    for i, h in enumerate(trace.hidden, 1):
        rd = row_diff(h.values) if h.shape[0] >= 2 else 0.0
        cd = col_diff(h.values) if h.shape[1] >= 2 else 0.0
        rows.append((i, rd, cd))
    return rows

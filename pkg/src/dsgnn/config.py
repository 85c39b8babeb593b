"""Experiment configuration: strict JSON parsing into dataclasses.

Unknown keys and type mismatches are reported with JSON pointer paths.
"""

from __future__ import annotations

import inspect
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .graph import (
    GraphDataset,
    NodeDataset,
    load_graph_dataset,
    load_node_dataset,
    row_normalize,
    synthetic_graph_task,
    synthetic_node_task,
)
from .models import ArchitectureSpec
from .training import TrainConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DATASET_KINDS = ("node_dir", "graph_file", "synthetic_node", "synthetic_graph")
GENERATORS = {"synthetic_node": synthetic_node_task, "synthetic_graph": synthetic_graph_task}


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


@dataclass
class DatasetConfig:
    kind: str = "synthetic_node"
    path: str = ""
    row_normalize: bool = False
    params: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)


def _check_type(value, default, pointer: str):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(pointer, f"expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _build(cls, data, pointer: str):
    if not isinstance(data, dict):
        raise ConfigError(pointer, "expected an object")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{pointer}/{key}", "unknown key")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        default = getattr(defaults, f.name)
        sub = f"{pointer}/{f.name}"
        if hasattr(default, "__dataclass_fields__"):
            kwargs[f.name] = _build(type(default), data[f.name], sub)
        else:
            kwargs[f.name] = _check_type(data[f.name], default, sub)
    return cls(**kwargs)


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("/schema_version", f"unsupported schema version {version!r}")
    cfg = _build(ExperimentConfig, data, "")
    if cfg.dataset.kind not in DATASET_KINDS:
        raise ConfigError("/dataset/kind", f"must be one of {DATASET_KINDS}")
    if cfg.dataset.kind in GENERATORS:
        allowed = set(inspect.signature(GENERATORS[cfg.dataset.kind]).parameters)
        for key in cfg.dataset.params:
            if key not in allowed:
                raise ConfigError(f"/dataset/params/{key}", "unknown generator parameter")
    elif not cfg.dataset.path:
        raise ConfigError("/dataset/path", "required for file datasets")
    try:
        cfg.model.validate()
    except ValueError as exc:
        raise ConfigError("/model", str(exc)) from None
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError("/train", str(exc)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("", f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    cfg = parse_config(data)
    env_seed = os.environ.get("DSGNN_SEED")
    if env_seed is not None:
        try:
            cfg.train.seed = int(env_seed)
        except ValueError:
            raise ConfigError("/train/seed", f"DSGNN_SEED={env_seed!r} is not an integer") from None
        log.warning("DSGNN_SEED overrides config seed: using %d", cfg.train.seed)
    return cfg


def load_dataset(block: DatasetConfig, path_override=None):
    """Load or generate the dataset described by ``block``."""
    path = path_override or block.path
    if path_override is not None:
        data = load_node_dataset(path) if Path(path).is_dir() else load_graph_dataset(path)
    elif block.kind == "node_dir":
        data = load_node_dataset(path)
    elif block.kind == "graph_file":
        data = load_graph_dataset(path)
    else:
        data = GENERATORS[block.kind](**block.params)
    if block.row_normalize and isinstance(data, NodeDataset):
        data = data.with_features(row_normalize(data.graph.features))
    return data


def resolve_model_spec(spec: ArchitectureSpec, data) -> ArchitectureSpec:
    """Fill task, class count and regression flag from the dataset."""
    from dataclasses import replace

    if isinstance(data, GraphDataset):
        if data.task == "regression":
            return replace(spec, task="graph", regression=True, num_classes=1)
        return replace(spec, task="graph", regression=False, num_classes=max(2, data.num_classes))
    return replace(spec, task="node", regression=False, num_classes=max(2, data.num_classes))

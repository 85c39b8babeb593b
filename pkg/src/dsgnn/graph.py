"""Graphs, datasets, loaders, synthetic generators and CV folds.

Everything here is immutable after construction. Adjacency is kept in CSR
form (row offsets + sorted column indices) over a symmetrized edge set.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

UNLABELED = -1

GRAPH_CLASS_NAMES = ("cycle", "path", "star")


class DatasetError(ValueError):
    """Malformed dataset input. The message names the file and line."""


@dataclass(frozen=True)
class CSR:
    indptr: np.ndarray
    indices: np.ndarray
    num_nodes: int

    @property
    def num_edges(self) -> int:
        return int(self.indices.shape[0])

    @cached_property
    def rows(self) -> np.ndarray:
        """Row (destination) node of every stored edge."""
        return np.repeat(np.arange(self.num_nodes), np.diff(self.indptr))

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def has_self_loops(self) -> bool:
        if self.num_nodes == 0:
            return True
        loops = np.zeros(self.num_nodes, dtype=bool)
        loops[self.rows[self.rows == self.indices]] = True
        return bool(loops.all())

    def is_symmetric(self) -> bool:
        fwd = set(zip(self.rows.tolist(), self.indices.tolist()))
        return all((j, i) in fwd for i, j in fwd)

    def to_dense(self, weights: np.ndarray | None = None) -> np.ndarray:
        out = np.zeros((self.num_nodes, self.num_nodes))
        w = np.ones(self.num_edges) if weights is None else weights
        out[self.rows, self.indices] = w
        return out


def csr_from_edges(edges: np.ndarray, num_nodes: int, *, self_loops: bool = False) -> CSR:
    """Build a symmetric, deduplicated CSR from an (E, 2) array of node pairs.

    Self-pairs in the input are dropped unless ``self_loops`` is set, in which
    case every node gets exactly one.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    keep = src != dst
    src, dst = src[keep], dst[keep]
    if self_loops:
        loop = np.arange(num_nodes, dtype=np.int64)
        src = np.concatenate([src, loop])
        dst = np.concatenate([dst, loop])
    key = np.unique(src * max(num_nodes, 1) + dst)
    src, dst = key // max(num_nodes, 1), key % max(num_nodes, 1)
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_nodes), out=indptr[1:])
    return CSR(indptr=indptr, indices=dst.astype(np.int64), num_nodes=num_nodes)


@dataclass(frozen=True)
class Graph:
    csr: CSR
    features: np.ndarray
    self_loops_included: bool = False

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.csr.num_nodes:
            raise ValueError(
                f"features have shape {self.features.shape}, expected ({self.csr.num_nodes}, d)"
            )

    @classmethod
    def from_edges(cls, edges, features, *, self_loops: bool = False) -> "Graph":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        csr = csr_from_edges(np.asarray(edges).reshape(-1, 2), features.shape[0], self_loops=self_loops)
        return cls(csr=csr, features=features, self_loops_included=self_loops)

    @property
    def num_nodes(self) -> int:
        return self.csr.num_nodes

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def edge_list(self) -> np.ndarray:
        """Undirected edges (i < j), excluding self-loops."""
        rows, cols = self.csr.rows, self.csr.indices
        keep = rows < cols
        return np.stack([rows[keep], cols[keep]], axis=1)

    @cached_property
    def with_self_loops(self) -> CSR:
        if self.self_loops_included:
            return self.csr
        return csr_from_edges(self.edge_list(), self.num_nodes, self_loops=True)

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(csr=self.csr, features=features, self_loops_included=self.self_loops_included)


@dataclass(frozen=True)
class NormalizedAdjacency:
    csr: CSR
    weights: np.ndarray
    derivation: str = "gcn_symmetric"


def normalized_adjacency(g: Graph) -> NormalizedAdjacency:
    """Symmetric normalization D^-1/2 (A + I) D^-1/2 over the CSR of A + I."""
    csr = g.with_self_loops
    deg = csr.degrees.astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(deg)
    weights = inv_sqrt[csr.rows] * inv_sqrt[csr.indices]
    return NormalizedAdjacency(csr=csr, weights=weights, derivation="gcn_symmetric")


@dataclass(frozen=True)
class NodeDataset:
    graph: Graph
    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        n = self.graph.num_nodes
        parts = {"train": self.train, "val": self.val, "test": self.test}
        for name, idx in parts.items():
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DatasetError(f"{name} split has an index outside [0, {n})")
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            if np.intersect1d(parts[a], parts[b]).size:
                raise DatasetError(f"overlapping splits: {a} and {b} share indices")
        if self.train.size and (self.labels[self.train] < 0).any():
            raise DatasetError("train split contains unlabeled nodes")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def with_features(self, features: np.ndarray) -> "NodeDataset":
        return replace(self, graph=self.graph.with_features(features))


@dataclass(frozen=True)
class GraphDataset:
    graphs: tuple[Graph, ...]
    targets: np.ndarray
    task: str = "classification"
    feature_dim: int = field(default=0)

    def __post_init__(self):
        if len(self.graphs) != len(self.targets):
            raise DatasetError(f"{len(self.graphs)} graphs but {len(self.targets)} targets")
        if self.task not in ("classification", "regression"):
            raise DatasetError(f"unknown task {self.task!r}")
        if self.task == "classification" and (self.targets < 0).any():
            raise DatasetError("classification targets must be non-negative")

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def num_classes(self) -> int:
        return int(self.targets.max()) + 1 if self.task == "classification" else 1

    def subset(self, idx) -> list[Graph]:
        return [self.graphs[i] for i in idx]


def batch_graphs(graphs: Sequence[Graph]) -> tuple[Graph, np.ndarray]:
    """Merge graphs into one block-diagonal graph (self-loops included).

    Returns the merged graph and the graph id of every node.
    """
    indptrs, indices, feats, seg = [], [], [], []
    offset_nodes, offset_edges = 0, 0
    for gid, g in enumerate(graphs):
        csr = g.with_self_loops
        indptrs.append(csr.indptr[:-1] + offset_edges)
        indices.append(csr.indices + offset_nodes)
        feats.append(g.features)
        seg.append(np.full(g.num_nodes, gid, dtype=np.int64))
        offset_nodes += g.num_nodes
        offset_edges += csr.num_edges
    indptr = np.concatenate(indptrs + [np.array([offset_edges])]).astype(np.int64)
    csr = CSR(indptr=indptr, indices=np.concatenate(indices).astype(np.int64), num_nodes=offset_nodes)
    merged = Graph(csr=csr, features=np.concatenate(feats, axis=0), self_loops_included=True)
    return merged, np.concatenate(seg)


def row_normalize(features: np.ndarray) -> np.ndarray:
    sums = features.sum(axis=1, keepdims=True)
    sums[sums == 0] = 1.0
    return features / sums


def zero_features(ds: NodeDataset, proportion: float, rng_seed) -> NodeDataset:
    """Zero the feature rows of a random ``proportion`` of val and test nodes."""
    if not 0.0 <= proportion <= 1.0:
        raise ValueError(f"proportion must be in [0, 1], got {proportion}")
    pool = np.union1d(ds.val, ds.test)
    count = int(np.floor(proportion * pool.size + 0.5))
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(pool, size=count, replace=False) if count else np.array([], dtype=np.int64)
    features = ds.graph.features.copy()
    features[chosen] = 0.0
    return ds.with_features(features)


# ---------------------------------------------------------------- loaders


def _read_lines(path: Path) -> list[str]:
    if not path.exists():
        raise DatasetError(f"{path}: missing file")
    return path.read_text().splitlines()


def load_node_dataset(dir_path) -> NodeDataset:
    root = Path(dir_path)
    feat_path = root / "features.csv"
    rows = []
    width = None
    for lineno, line in enumerate(_read_lines(feat_path), 1):
        if not line.strip():
            continue
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError as exc:
            raise DatasetError(f"{feat_path}:{lineno}: {exc}") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DatasetError(f"{feat_path}:{lineno}: expected {width} values, found {len(row)}")
        rows.append(row)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), width or 0)
    n = features.shape[0]

    label_path = root / "labels.csv"
    labels = []
    for lineno, line in enumerate(_read_lines(label_path), 1):
        if not line.strip():
            continue
        try:
            labels.append(int(line.strip()))
        except ValueError:
            raise DatasetError(f"{label_path}:{lineno}: not an integer label: {line!r}") from None
    if len(labels) != n:
        raise DatasetError(f"{label_path}: {len(labels)} labels for {n} feature rows")

    edge_path = root / "edges.tsv"
    edges = []
    for lineno, line in enumerate(_read_lines(edge_path), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise DatasetError(f"{edge_path}:{lineno}: expected two node ids")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise DatasetError(f"{edge_path}:{lineno}: node ids must be integers") from None
        for node in (u, v):
            if not 0 <= node < n:
                raise DatasetError(f"{edge_path}:{lineno}: node index {node} out of range [0, {n})")
        edges.append((u, v))

    split_path = root / "splits.json"
    if not split_path.exists():
        raise DatasetError(f"{split_path}: missing file")
    try:
        splits = json.loads(split_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{split_path}:{exc.lineno}: {exc.msg}") from None
    parts = {}
    for name in ("train", "val", "test"):
        if name not in splits:
            raise DatasetError(f"{split_path}: missing split {name!r}")
        idx = np.asarray(splits[name], dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise DatasetError(f"{split_path}: {name} split has an index out of range [0, {n})")
        if np.unique(idx).size != idx.size:
            raise DatasetError(f"{split_path}: {name} split has duplicate indices")
        parts[name] = idx
    for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
        if np.intersect1d(parts[a], parts[b]).size:
            raise DatasetError(f"{split_path}: overlapping splits ({a}/{b})")

    graph = Graph.from_edges(np.array(edges, dtype=np.int64).reshape(-1, 2), features)
    return NodeDataset(graph=graph, labels=np.asarray(labels, dtype=np.int64), **parts)


def save_node_dataset(ds: NodeDataset, dir_path) -> None:
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    edges = ds.graph.edge_list()
    (root / "edges.tsv").write_text("".join(f"{u}\t{v}\n" for u, v in edges.tolist()))
    (root / "features.csv").write_text(
        "".join(",".join(repr(float(x)) for x in row) + "\n" for row in ds.graph.features)
    )
    (root / "labels.csv").write_text("".join(f"{int(y)}\n" for y in ds.labels))
    splits = {k: getattr(ds, k).tolist() for k in ("train", "val", "test")}
    (root / "splits.json").write_text(json.dumps(splits) + "\n")


def load_graph_dataset(file_path) -> GraphDataset:
    path = Path(file_path)
    lines = _read_lines(path)
    if not lines:
        raise DatasetError(f"{path}:1: missing header line")
    try:
        header = json.loads(lines[0])
        task = header["task"]
        width = int(header["feature_dim"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}:1: malformed header ({exc})") from None
    if task not in ("classification", "regression"):
        raise DatasetError(f"{path}:1: unknown task {task!r}")

    graphs, targets = [], []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            feats = np.asarray(rec["features"], dtype=np.float64)
            edges = np.asarray(rec["edges"], dtype=np.int64).reshape(-1, 2)
            target = rec["target"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed line ({exc})") from None
        if feats.ndim != 2 or feats.shape[1] != width:
            raise DatasetError(
                f"{path}:{lineno}: feature rows must have width {width}, got shape {feats.shape}"
            )
        n = feats.shape[0]
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise DatasetError(f"{path}:{lineno}: edge endpoint out of range [0, {n})")
        if task == "classification" and (not isinstance(target, int) or target < 0):
            raise DatasetError(f"{path}:{lineno}: classification target must be a non-negative int")
        graphs.append(Graph.from_edges(edges, feats))
        targets.append(target)
    dtype = np.int64 if task == "classification" else np.float64
    return GraphDataset(graphs=tuple(graphs), targets=np.asarray(targets, dtype=dtype), task=task, feature_dim=width)


def save_graph_dataset(ds: GraphDataset, file_path) -> None:
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = [json.dumps({"task": ds.task, "feature_dim": ds.feature_dim})]
    for g, y in zip(ds.graphs, ds.targets):
        target = int(y) if ds.task == "classification" else float(y)
        out.append(json.dumps({
            "edges": g.edge_list().tolist(),
            "features": g.features.tolist(),
            "target": target,
        }))
    path.write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------- synthetic


def synthetic_node_task(
    num_nodes: int = 600,
    num_classes: int = 3,
    homophily: float = 0.9,
    feature_dim: int = 16,
    noise: float = 1.0,
    seed: int = 0,
    avg_degree: float = 6.0,
    train_per_class: int = 20,
    num_val: int = 500,
) -> NodeDataset:
    """Stochastic block model with Gaussian class-conditional features.

    Each node expects ``homophily * avg_degree`` same-class neighbours and
    the rest spread over the other classes.
    """
    if num_nodes < num_classes:
        raise ValueError("num_nodes must be >= num_classes")
    if not 0.0 <= homophily <= 1.0:
        raise ValueError("homophily must be in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = np.arange(num_nodes) % num_classes
    rng.shuffle(labels)
    sizes = np.bincount(labels, minlength=num_classes)

    p_in = min(1.0, homophily * avg_degree / max(sizes.mean() - 1, 1))
    others = num_nodes - sizes.mean()
    p_out = min(1.0, (1.0 - homophily) * avg_degree / max(others, 1)) if num_classes > 1 else 0.0
    iu, ju = np.triu_indices(num_nodes, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_in, p_out)
    hit = rng.random(iu.shape[0]) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)

    means = rng.normal(size=(num_classes, feature_dim))
    features = means[labels] + noise * rng.normal(size=(num_nodes, feature_dim))

    train = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        take = min(train_per_class, max(1, members.size // 3))
        train.extend(rng.choice(members, size=take, replace=False).tolist())
    train = np.sort(np.array(train, dtype=np.int64))
    rest = rng.permutation(np.setdiff1d(np.arange(num_nodes), train))
    n_val = min(num_val, rest.size // 2)
    val, test = np.sort(rest[:n_val]), np.sort(rest[n_val:])
    graph = Graph.from_edges(edges, features)
    return NodeDataset(graph=graph, labels=labels.astype(np.int64), train=train, val=val, test=test)


def _shape_edges(kind: str, n: int) -> np.ndarray:
    if kind == "cycle":
        return np.array([(i, (i + 1) % n) for i in range(n)])
    if kind == "path":
        return np.array([(i, i + 1) for i in range(n - 1)])
    if kind == "star":
        return np.array([(0, i) for i in range(1, n)])
    raise ValueError(kind)


def graph_diameter(g: Graph) -> int:
    """Longest shortest path, by BFS from every node (connected graphs)."""
    csr = g.csr
    best = 0
    for s in range(g.num_nodes):
        dist = {s: 0}
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in csr.indices[csr.indptr[u]:csr.indptr[u + 1]]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        best = max(best, max(dist.values()))
    return best


def degree_features(edges: np.ndarray, n: int, feature_dim: int) -> np.ndarray:
    deg = np.bincount(edges.reshape(-1), minlength=n) if edges.size else np.zeros(n, dtype=int)
    feats = np.zeros((n, feature_dim))
    feats[np.arange(n), np.minimum(deg, feature_dim - 1)] = 1.0
    return feats


def synthetic_graph_task(
    num_graphs: int = 120,
    task: str = "classification",
    seed: int = 0,
    min_nodes: int = 4,
    max_nodes: int = 12,
    feature_dim: int = 8,
) -> GraphDataset:
    """Cycles, paths and stars with one-hot degree features.

    Classification labels the topology; regression targets diameter / size.
    """
    if num_graphs < 10:
        raise ValueError("num_graphs must be >= 10")
    if task not in ("classification", "regression"):
        raise ValueError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    graphs, targets = [], []
    for i in range(num_graphs):
        cls = i % len(GRAPH_CLASS_NAMES)
        n = int(rng.integers(min_nodes, max_nodes + 1))
        edges = _shape_edges(GRAPH_CLASS_NAMES[cls], n)
        perm = rng.permutation(n)
        edges = perm[edges]
        g = Graph.from_edges(edges, degree_features(edges, n, feature_dim))
        graphs.append(g)
        targets.append(cls if task == "classification" else graph_diameter(g) / n)
    order = rng.permutation(num_graphs)
    graphs = tuple(graphs[i] for i in order)
    dtype = np.int64 if task == "classification" else np.float64
    targets = np.asarray(targets, dtype=dtype)[order]
    return GraphDataset(graphs=graphs, targets=targets, task=task, feature_dim=feature_dim)


# ---------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]
    num_folds: int
    repeat_seed: int

    def __iter__(self):
        return iter(self.folds)

    def __len__(self) -> int:
        return len(self.folds)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _stratified_take(idx: np.ndarray, labels: np.ndarray | None, count: int, rng) -> np.ndarray:
    """Pick ``count`` of ``idx``, proportionally per class (largest remainder)."""
    if labels is None:
        return rng.permutation(idx)[:count]
    classes, inverse = np.unique(labels[idx], return_inverse=True)
    sizes = np.bincount(inverse)
    quota = sizes * count / idx.size
    take = np.floor(quota).astype(int)
    short = count - take.sum()
    take[np.argsort(-(quota - take), kind="stable")[:short]] += 1
    chosen = [rng.permutation(idx[inverse == k])[:take[k]] for k in range(classes.size)]
    return np.concatenate(chosen)


def make_folds(dataset_size: int, num_folds: int, stratify_labels=None, seed: int = 0,
               val_fraction: float = 0.1) -> FoldPlan:
    """k-fold test partitions, each with a validation carve-out of the rest."""
    if num_folds < 2:
        raise ValueError("num_folds must be >= 2")
    if dataset_size < num_folds:
        raise ValueError("dataset_size must be >= num_folds")
    rng = np.random.default_rng(seed)
    labels = None if stratify_labels is None else np.asarray(stratify_labels)
    assignment = np.empty(dataset_size, dtype=np.int64)
    if labels is None:
        perm = rng.permutation(dataset_size)
        assignment[perm] = np.arange(dataset_size) % num_folds
    else:
        offset = 0
        for c in np.unique(labels):
            members = np.flatnonzero(labels == c)
            if members.size < num_folds:
                raise ValueError(
                    f"cannot stratify: class {c} has {members.size} members for {num_folds} folds"
                )
            members = rng.permutation(members)
            assignment[members] = (np.arange(members.size) + offset) % num_folds
            offset += members.size

    folds = []
    everything = np.arange(dataset_size)
    for k in range(num_folds):
        test = np.flatnonzero(assignment == k)
        rest = np.setdiff1d(everything, test)
        n_val = max(1, _round_half_up(val_fraction * rest.size))
        val = np.sort(_stratified_take(rest, labels, n_val, rng))
        train = np.setdiff1d(rest, val)
        folds.append((train, val, test))
    return FoldPlan(folds=tuple(folds), num_folds=num_folds, repeat_seed=seed)

"""Standard GNN, JKNet and deeply-supervised GNN assembly.

Depth counts every layer that maps to the output: a depth-K standard GNN is
K attention layers, while JKNet and DSGNN use K - 1 attention layers plus a
linear output layer (one per attention layer for DSGNN).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph, GraphDataset, NodeDataset, batch_graphs, normalized_adjacency
from .layers import (
    GatLayerParams,
    GcnLayerParams,
    LinearHeadParams,
    PairNormParams,
    gat_forward,
    gcn_forward,
    jump_concat,
    linear_logits,
    pairnorm_forward,
)

VARIANTS = ("standard", "jknet", "dsgnn")


class SpecError(ValueError):
    pass


@dataclass
class ArchitectureSpec:
    task: str = "node"                 # node | graph
    variant: str = "dsgnn"             # standard | jknet | dsgnn
    depth: int = 2
    hidden: int = 8                    # per-head width
    num_heads: int = 8
    head_combine: str = "concat"       # concat | average
    activation: str = "elu"
    readout: str = "max"
    pairnorm: bool = False
    pairnorm_scale: float = 1.0
    pairnorm_mode: str = "individual"
    pairnorm_placement: str = "after"  # after | before the layer nonlinearity
    num_classes: int = 2
    regression: bool = False
    feature_dropout: float = 0.0
    attention_dropout: float = 0.0
    head_bias: bool = True
    conv_bias: bool = False
    conv: str = "gat"                  # gat | gcn

    def validate(self) -> None:
        checks = [
            (self.task in ("node", "graph"), f"task must be node or graph, got {self.task!r}"),
            (self.variant in VARIANTS, f"variant must be one of {VARIANTS}, got {self.variant!r}"),
            (self.depth >= 2, f"depth must be >= 2, got {self.depth}"),
            (self.hidden >= 1 and self.num_heads >= 1, "hidden and num_heads must be positive"),
            (self.head_combine in ("concat", "average"), f"unknown head_combine {self.head_combine!r}"),
            (self.activation in ("relu", "elu", "leaky_relu", "identity"),
             f"unknown activation {self.activation!r}"),
            (self.readout in ("max", "mean", "sum"), f"unknown readout {self.readout!r}"),
            (self.conv in ("gat", "gcn"), f"unknown conv {self.conv!r}"),
            (self.pairnorm_placement in ("after", "before"),
             f"pairnorm_placement must be after or before, got {self.pairnorm_placement!r}"),
            (self.regression or self.num_classes >= 2, "classification needs num_classes >= 2"),
            (not (self.regression and self.task == "node"), "node regression is not supported"),
            (0 <= self.feature_dropout < 1 and 0 <= self.attention_dropout < 1, "dropout must be in [0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise SpecError(msg)
        PairNormParams(self.pairnorm_scale, self.pairnorm_mode)

    @property
    def out_dim(self) -> int:
        return 1 if self.regression else self.num_classes

    @property
    def num_conv_layers(self) -> int:
        return self.depth if self.variant == "standard" else self.depth - 1


@dataclass
class Model:
    spec: ArchitectureSpec
    input_dim: int
    seed: int
    convs: list = field(default_factory=list)
    heads: list[LinearHeadParams] = field(default_factory=list)
    pairnorm: PairNormParams | None = None

    def parameters(self) -> list[Tensor]:
        """Trainable tensors in a fixed registry order (convs, then heads)."""
        out = []
        for layer in self.convs:
            out.extend(layer.parameters())
        for head in self.heads:
            out.extend(head.parameters())
        return out

    def state(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.parameters()]

    def load_state(self, state: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(state) != len(params):
            raise ValueError(f"state has {len(state)} arrays for {len(params)} parameters")
        for p, v in zip(params, state):
            if p.values.shape != v.shape:
                raise ValueError(f"state shape {v.shape} does not match parameter {p.values.shape}")
            p.values[...] = v


def _conv_layer(spec: ArchitectureSpec, d_in: int, rng, *, final: bool):
    act = "identity" if final else spec.activation
    if spec.conv == "gcn":
        d_out = spec.out_dim if final else spec.hidden * spec.num_heads
        return GcnLayerParams.init(d_in, d_out, rng, activation=act)
    if final:
        return GatLayerParams.init(d_in, spec.out_dim, 1, rng, combine="concat", activation=act,
                                   feat_dropout=spec.feature_dropout, attn_dropout=spec.attention_dropout,
                                   bias=spec.conv_bias)
    return GatLayerParams.init(d_in, spec.hidden, spec.num_heads, rng, combine=spec.head_combine,
                               activation=act, feat_dropout=spec.feature_dropout,
                               attn_dropout=spec.attention_dropout, bias=spec.conv_bias)


def _width(layer) -> int:
    return layer.out_width if isinstance(layer, GatLayerParams) else layer.W.shape[1]


def build_model(spec: ArchitectureSpec, input_dim: int, seed: int = 0) -> Model:
    spec.validate()
    if input_dim < 1:
        raise SpecError("input_dim must be >= 1")
    rng = np.random.default_rng(seed)
    output = "identity" if spec.regression else "softmax"
    model = Model(spec=spec, input_dim=input_dim, seed=seed)
    if spec.pairnorm:
        model.pairnorm = PairNormParams(spec.pairnorm_scale, spec.pairnorm_mode)
    d = input_dim
    for i in range(spec.num_conv_layers):
        final = spec.variant == "standard" and i == spec.num_conv_layers - 1
        layer = _conv_layer(spec, d, rng, final=final)
        model.convs.append(layer)
        d = _width(layer)
    if spec.variant == "dsgnn":
        model.heads = [LinearHeadParams.init(_width(c), spec.out_dim, rng, bias=spec.head_bias, output=output)
                       for c in model.convs]
    elif spec.variant == "jknet":
        total = sum(_width(c) for c in model.convs)
        model.heads = [LinearHeadParams.init(total, spec.out_dim, rng, bias=spec.head_bias, output=output)]
    return model


def param_count(m: Model, heads: str = "all") -> int:
    """Number of trainable scalars; ``heads="last"`` counts only the final head."""
    convs = sum(p.values.size for c in m.convs for p in c.parameters())
    chosen = m.heads if heads == "all" else m.heads[-1:]
    return convs + sum(p.values.size for h in chosen for p in h.parameters())


@dataclass
class ForwardTrace:
    hidden: list[Tensor]          # per conv layer node representations
    graph_reprs: list[Tensor]     # per layer readouts (graph task; empty for node task)
    logits: list[Tensor]          # per output layer, pre-softmax (or regression values)
    variant: str = "dsgnn"


def _forward(m: Model, graph: Graph, segments: np.ndarray | None, num_graphs: int | None,
             training: bool, rng) -> ForwardTrace:
    spec = m.spec
    if graph.feature_dim != m.input_dim:
        raise ValueError(f"feature width {graph.feature_dim} does not match model input {m.input_dim}")
    csr = graph.with_self_loops
    adj = normalized_adjacency(graph) if spec.conv == "gcn" else None
    h = Tensor(graph.features)
    hidden = []
    for i, layer in enumerate(m.convs):
        last_standard = spec.variant == "standard" and i == len(m.convs) - 1
        norm = m.pairnorm if not last_standard else None
        pre = None
        if norm is not None and spec.pairnorm_placement == "before":
            pre = lambda x, norm=norm: pairnorm_forward(norm, x)
        if isinstance(layer, GatLayerParams):
            h = gat_forward(layer, csr, h, training, rng, pre_activation=pre)
        else:
            h = ad.dropout(h, spec.feature_dropout, training, rng)
            h = gcn_forward(layer, adj, h, pre_activation=pre)
        if norm is not None and pre is None:
            h = pairnorm_forward(norm, h)
        hidden.append(h)

    graph_reprs = []
    if spec.task == "graph":
        graph_reprs = [ad.readout(x, spec.readout, segments, num_graphs) for x in hidden]
    reps = graph_reprs if spec.task == "graph" else hidden

    def head_input(x):
        return ad.dropout(x, spec.feature_dropout, training, rng)

    if spec.variant == "standard":
        logits = [reps[-1]]
    elif spec.variant == "jknet":
        logits = [linear_logits(m.heads[0], head_input(jump_concat(reps)))]
    else:
        logits = [linear_logits(head, head_input(x)) for head, x in zip(m.heads, reps)]
    return ForwardTrace(hidden=hidden, graph_reprs=graph_reprs, logits=logits, variant=spec.variant)


def forward_node(m: Model, ds: NodeDataset, training: bool = False, rng=None) -> ForwardTrace:
    return _forward(m, ds.graph, None, None, training, rng)


def forward_graph(m: Model, graphs, training: bool = False, rng=None) -> ForwardTrace:
    """Forward over a list of graphs merged into one block-diagonal batch."""
    graphs = list(graphs.graphs) if isinstance(graphs, GraphDataset) else list(graphs)
    merged, segments = batch_graphs(graphs)
    return _forward(m, merged, segments, len(graphs), training, rng)


def layer_loss(logits: Tensor, targets, regression: bool, reduction: str = "mean") -> Tensor:
    if regression:
        return ad.mse(logits, targets)
    return ad.cross_entropy(logits, targets, reduction=reduction)


def ds_total_loss(trace: ForwardTrace, targets, mask=None, *, regression: bool = False,
                  reduction: str = "mean") -> tuple[Tensor, list[Tensor]]:
    """Mean of the per-output-layer losses over the supervised rows.

    ``mask`` selects rows of every output (training nodes); ``None`` uses all
    rows (a batch of training graphs). Returns the total and the per-layer
    losses.
    """
    targets = np.asarray(targets)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.int64)
        if mask.size == 0:
            raise ValueError("empty training mask")
        targets = targets[mask]
    per_layer = []
    for z in trace.logits:
        rows = ad.gather_rows(z, mask) if mask is not None else z
        per_layer.append(layer_loss(rows, targets, regression, reduction))
    return ad.mean_of(per_layer), per_layer


def combined_logits(trace: ForwardTrace) -> np.ndarray:
    """Average of all output layers' pre-softmax values."""
    return np.mean([z.values for z in trace.logits], axis=0)


def predict(m: Model, trace: ForwardTrace) -> np.ndarray:
    """Class indices (first index wins ties) or regression values."""
    scores = combined_logits(trace) if m.spec.variant == "dsgnn" else trace.logits[-1].values
    if m.spec.regression:
        return scores[:, 0]
    return np.argmax(ad.log_softmax_rows(scores), axis=1)


def predict_proba(m: Model, trace: ForwardTrace) -> np.ndarray:
    scores = combined_logits(trace) if m.spec.variant == "dsgnn" else trace.logits[-1].values
    return np.exp(ad.log_softmax_rows(scores))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(m: Model, path, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` (spec, seed, shapes) and ``<path>.bin`` (float64 LE)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = m.parameters()
    manifest = {
        "spec": asdict(m.spec),
        "input_dim": m.input_dim,
        "seed": m.seed,
        "shapes": [list(p.values.shape) for p in params],
        "prediction": "mean of pre-softmax head outputs, then softmax",
        **(extra or {}),
    }
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    flat = np.concatenate([p.values.reshape(-1) for p in params]) if params else np.zeros(0)
    path.with_suffix(".bin").write_bytes(flat.astype("<f8").tobytes())
    return json_path


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "model.json"
    manifest = json.loads(path.with_suffix(".json").read_text())
    spec = ArchitectureSpec(**manifest["spec"])
    model = build_model(spec, manifest["input_dim"], manifest["seed"])
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    state, pos = [], 0
    for shape in manifest["shapes"]:
        size = int(np.prod(shape))
        state.append(flat[pos:pos + size].reshape(shape))
        pos += size
    if pos != flat.size:
        raise ValueError(f"checkpoint has {flat.size} values, manifest expects {pos}")
    model.load_state(state)
    return model, manifest

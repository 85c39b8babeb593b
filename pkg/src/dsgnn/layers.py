"""Graph layers built from autodiff ops: GCN, multi-head GAT, PairNorm, heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import CSR, NormalizedAdjacency

LEAKY_SLOPE = 0.2


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


@dataclass
class GcnLayerParams:
    W: Tensor
    activation: str = "relu"

    @classmethod
    def init(cls, d_in: int, d_out: int, rng, activation: str = "relu") -> "GcnLayerParams":
        return cls(W=Tensor(glorot(rng, d_in, d_out), requires_grad=True, name="W"), activation=activation)

    def parameters(self) -> list[Tensor]:
        return [self.W]


@dataclass
class GatLayerParams:
    W: Tensor          # (d_in, num_heads * d_head), all heads side by side
    attn: Tensor       # (2 * d_head, num_heads), column k is head k's attention vector
    num_heads: int
    d_head: int
    combine: str = "concat"
    activation: str = "elu"
    feat_dropout: float = 0.0
    attn_dropout: float = 0.0
    bias: Tensor | None = None

    @classmethod
    def init(cls, d_in: int, d_head: int, num_heads: int, rng, *, combine="concat", activation="elu",
             feat_dropout=0.0, attn_dropout=0.0, bias=False) -> "GatLayerParams":
        W = np.concatenate([glorot(rng, d_in, d_head) for _ in range(num_heads)], axis=1)
        attn = np.concatenate(
            [glorot(rng, 2 * d_head, 1) for _ in range(num_heads)], axis=1)
        out_width = num_heads * d_head if combine == "concat" else d_head
        b = Tensor(np.zeros((1, out_width)), requires_grad=True, name="gat_bias") if bias else None
        return cls(W=Tensor(W, requires_grad=True, name="W"), attn=Tensor(attn, requires_grad=True, name="attn"),
                   num_heads=num_heads, d_head=d_head, combine=combine, activation=activation,
                   feat_dropout=feat_dropout, attn_dropout=attn_dropout, bias=b)

    @property
    def out_width(self) -> int:
        return self.num_heads * self.d_head if self.combine == "concat" else self.d_head

    def parameters(self) -> list[Tensor]:
        return [self.W, self.attn] + ([self.bias] if self.bias is not None else [])


@dataclass
class LinearHeadParams:
    W: Tensor
    bias: Tensor | None = None
    output: str = "softmax"   # softmax | identity

    @classmethod
    def init(cls, d_in: int, d_out: int, rng, *, bias: bool = True, output: str = "softmax") -> "LinearHeadParams":
        b = Tensor(np.zeros((1, d_out)), requires_grad=True, name="head_bias") if bias else None
        return cls(W=Tensor(glorot(rng, d_in, d_out), requires_grad=True, name="W_G"), bias=b, output=output)

    def parameters(self) -> list[Tensor]:
        return [self.W] + ([self.bias] if self.bias is not None else [])


@dataclass
class PairNormParams:
    scale: float = 1.0
    mode: str = "individual"   # individual | global

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("PairNorm scale must be positive")
        if self.mode not in ("individual", "global"):
            raise ValueError(f"unknown PairNorm mode {self.mode!r}")


def gcn_forward(p: GcnLayerParams, adj: NormalizedAdjacency, h: Tensor, pre_activation=None) -> Tensor:
    agg = ad.matmul(ad.segment_weighted_sum(adj.csr, adj.weights, h), p.W)
    if pre_activation is not None:
        agg = pre_activation(agg)
    return ad.activation(agg, p.activation)


def attention_coefficients(p: GatLayerParams, csr: CSR, proj: Tensor) -> Tensor:
    """Per-edge, per-head normalized attention (E, num_heads)."""
    src = ad.headwise_dot(proj, p.attn, p.num_heads, offset=0)
    dst = ad.headwise_dot(proj, p.attn, p.num_heads, offset=p.d_head)
    logits = ad.add(ad.gather_rows(src, csr.rows), ad.gather_rows(dst, csr.indices))
    return ad.edge_softmax(ad.activation(logits, "leaky_relu", LEAKY_SLOPE), csr)


def gat_forward(p: GatLayerParams, csr: CSR, h: Tensor, training: bool = False,
                rng: np.random.Generator | None = None, pre_activation=None) -> Tensor:
    """Multi-head attention layer; ``pre_activation`` maps the combined heads
    before the nonlinearity (used for PairNorm placed before it)."""
    if h.shape[0] != csr.num_nodes:
        raise ValueError(f"h has {h.shape[0]} rows for a {csr.num_nodes}-node graph")
    if h.shape[1] != p.W.shape[0]:
        raise ValueError(f"input width {h.shape[1]} does not match W {p.W.shape}")
    if not csr.has_self_loops():
        raise ValueError("GAT needs self-loops on every node")
    x = ad.dropout(h, p.feat_dropout, training, rng)
    proj = ad.matmul(x, p.W)
    alpha = attention_coefficients(p, csr, proj)
    alpha = ad.dropout(alpha, p.attn_dropout, training, rng)
    out = ad.segment_weighted_sum(csr, alpha, proj)
    if p.combine == "average":
        out = ad.head_mean(out, p.num_heads)
    if p.bias is not None:
        out = ad.add(out, p.bias)
    if pre_activation is not None:
        out = pre_activation(out)
    return ad.activation(out, p.activation)


def pairnorm_forward(p: PairNormParams, h: Tensor) -> Tensor:
    centered = ad.center_cols(h)
    if p.mode == "individual":
        return ad.normalize_rows(centered, p.scale)
    return ad.normalize_frobenius(centered, p.scale)


def linear_logits(p: LinearHeadParams, h: Tensor) -> Tensor:
    if h.shape[1] != p.W.shape[0]:
        raise ValueError(f"head expects width {p.W.shape[0]}, got {h.shape[1]}")
    out = ad.matmul(h, p.W)
    return ad.add(out, p.bias) if p.bias is not None else out


def linear_head_forward(p: LinearHeadParams, h: Tensor) -> Tensor:
    out = linear_logits(p, h)
    return ad.softmax_rows(out) if p.output == "softmax" else out


def jump_concat(per_layer: list[Tensor]) -> Tensor:
    if not per_layer:
        raise ValueError("jump_concat needs at least one layer output")
    return per_layer[0] if len(per_layer) == 1 else ad.concat_cols(per_layer)

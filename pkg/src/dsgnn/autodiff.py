"""Tape-based reverse-mode differentiation over dense 2-D float64 arrays.

Every op builds its output eagerly and, when any input requires a gradient,
appends a backward rule to the thread's active tape. ``backward`` replays the
tape in reverse exactly once and then clears it.

Edge-valued quantities (attention logits/coefficients) are ordinary tensors
of shape (E, H): one row per stored CSR entry, one column per attention head.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

LOG_EPS = 1e-12


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name", "_backward", "_parents")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 0:
            values = values.reshape(1, 1)
        elif values.ndim == 1:
            values = values.reshape(-1, 1)
        elif values.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {values.shape}")
        self.values = values
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    def __init__(self):
        self.nodes: list[Tensor] = []
        self.enabled = True

    def record(self, out: Tensor) -> None:
        self.nodes.append(out)

    def clear(self) -> None:
        self.nodes.clear()


_local = threading.local()


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def no_grad():
    tape = active_tape()
    prev, tape.enabled = tape.enabled, False
    try:
        yield
    finally:
        tape.enabled = prev


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(values: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    tape = active_tape()
    needs = tape.enabled and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        tape.record(out)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad ancestor of a scalar loss."""
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    try:
        if not loss.requires_grad:
            return
        _accumulate(loss, np.ones_like(loss.values))
        for node in reversed(tape.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
    finally:
        for node in tape.nodes:
            node._backward = None
            node._parents = ()
        tape.clear()


# ---------------------------------------------------------------- basic ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _make(a.values @ b.values, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a single row broadcast over ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def bw(g):
            _accumulate(a, g)
            _accumulate(b, g)
    elif b.shape == (1, a.shape[1]):
        def bw(g):
            _accumulate(a, g)
            _accumulate(b, g.sum(axis=0, keepdims=True))
    else:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _make(a.values + b.values, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.values * c, (a,), lambda g: _accumulate(a, g * c))


def sum_all(a: Tensor) -> Tensor:
    return _make(np.array([[a.values.sum()]]), (a,), lambda g: _accumulate(a, np.full(a.shape, g[0, 0])))


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <a, weights> with a constant weight array."""
    weights = np.asarray(weights, dtype=np.float64).reshape(a.shape)
    return _make(np.array([[np.sum(a.values * weights)]]), (a,), lambda g: _accumulate(a, g[0, 0] * weights))


def mean_of(scalars: Sequence[Tensor]) -> Tensor:
    """Unweighted arithmetic mean of equally shaped tensors."""
    if not scalars:
        raise ValueError("mean of an empty list")
    k = len(scalars)
    total = np.sum([s.values for s in scalars], axis=0) / k

    def bw(g):
        for s in scalars:
            _accumulate(s, g / k)

    return _make(total, tuple(scalars), bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        if not x.requires_grad:
            return
        full = np.zeros_like(x.values)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _make(x.values[idx], (x,), bw)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("concat_cols needs at least one tensor")
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ValueError(f"concat_cols row mismatch: {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            _accumulate(t, g[:, lo:hi])

    return _make(np.concatenate([t.values for t in tensors], axis=1), tuple(tensors), bw)


# ---------------------------------------------------------------- activations


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    v = x.values
    if kind == "identity":
        return x
    if kind == "relu":
        mask = v > 0
        return _make(np.where(mask, v, 0.0), (x,), lambda g: _accumulate(x, g * mask))
    if kind == "leaky_relu":
        mask = v >= 0
        d = np.where(mask, 1.0, slope)
        return _make(v * d, (x,), lambda g: _accumulate(x, g * d))
    if kind == "elu":
        neg = np.expm1(np.minimum(v, 0.0))
        out = np.where(v > 0, v, neg)
        d = np.where(v > 0, 1.0, neg + 1.0)
        return _make(out, (x,), lambda g: _accumulate(x, g * d))
    raise ValueError(f"unknown activation {kind!r}")


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _accumulate(x, s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _make(s, (x,), bw)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------- graph ops


def _segment_reduce_max(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Per-row maximum of edge values; rows without entries get 0."""
    n = indptr.shape[0] - 1
    out = np.zeros((n, values.shape[1]))
    nonempty = indptr[:-1] < indptr[1:]
    if values.shape[0]:
        red = np.maximum.reduceat(values, indptr[:-1][nonempty], axis=0)
        out[nonempty] = red
    return out


def _segment_reduce_sum(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    n = indptr.shape[0] - 1
    out = np.zeros((n, values.shape[1]))
    nonempty = indptr[:-1] < indptr[1:]
    if values.shape[0]:
        out[nonempty] = np.add.reduceat(values, indptr[:-1][nonempty], axis=0)
    return out


def edge_softmax(logits: Tensor, csr) -> Tensor:
    """Softmax of edge logits within each row's neighbourhood, per column."""
    if logits.shape[0] != csr.num_edges:
        raise ValueError(f"{logits.shape[0]} edge logits for {csr.num_edges} edges")
    rows = csr.rows
    shifted = logits.values - _segment_reduce_max(logits.values, csr.indptr)[rows]
    e = np.exp(shifted)
    s = e / _segment_reduce_sum(e, csr.indptr)[rows]

    def bw(g):
        dot = _segment_reduce_sum(g * s, csr.indptr)[rows]
        _accumulate(logits, s * (g - dot))

    return _make(s, (logits,), bw)


def segment_weighted_sum(csr, weights, h: Tensor) -> Tensor:
    """out[i] = sum_j w_ij h[j] over the stored neighbours j of row i.

    ``weights`` is an (E,) array, an (E, 1) tensor, or an (E, H) tensor; with
    H columns the columns of ``h`` are split into H equal head blocks and
    block k is aggregated with weight column k.
    """
    if h.shape[0] != csr.num_nodes:
        raise ValueError(f"h has {h.shape[0]} rows for a {csr.num_nodes}-node adjacency")
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=np.float64).reshape(-1, 1))
    if w.shape[0] != csr.num_edges:
        raise ValueError(f"{w.shape[0]} edge weights for {csr.num_edges} edges")
    heads = w.shape[1]
    n, width = h.shape
    if width % heads:
        raise ValueError(f"width {width} is not divisible into {heads} head blocks")
    d = width // heads
    rows, cols = csr.rows, csr.indices
    mats = [
        sp.csr_matrix((w.values[:, k], cols, csr.indptr), shape=(n, n)) for k in range(heads)
    ]
    out = np.concatenate([m @ h.values[:, k * d:(k + 1) * d] for k, m in enumerate(mats)], axis=1) \
        if n else np.zeros((0, width))

    def bw(g):
        if h.requires_grad:
            _accumulate(h, np.concatenate(
                [m.T @ g[:, k * d:(k + 1) * d] for k, m in enumerate(mats)], axis=1))
        if w.requires_grad:
            gw = np.empty_like(w.values)
            for k in range(heads):
                blk = slice(k * d, (k + 1) * d)
                gw[:, k] = np.einsum("ed,ed->e", g[rows, blk], h.values[cols, blk])
            _accumulate(w, gw)

    return _make(out, (w, h), bw)


def headwise_dot(p: Tensor, attn: Tensor, num_heads: int, offset: int = 0) -> Tensor:
    """out[n, k] = <p[n, head block k], attn[offset:offset+d, k]>.

    ``attn`` has one column per head; ``offset`` selects which half of the
    concatenated attention vector is applied.
    """
    n, width = p.shape
    d = width // num_heads
    if width != d * num_heads or attn.shape[1] != num_heads or attn.shape[0] < offset + d:
        raise ValueError(f"headwise_dot shapes: p {p.shape}, attn {attn.shape}, heads {num_heads}")
    pb = p.values.reshape(n, num_heads, d)
    a = attn.values[offset:offset + d, :]
    out = np.einsum("nkd,dk->nk", pb, a)

    def bw(g):
        if p.requires_grad:
            _accumulate(p, np.einsum("nk,dk->nkd", g, a).reshape(n, width))
        if attn.requires_grad:
            full = np.zeros_like(attn.values)
            full[offset:offset + d, :] = np.einsum("nk,nkd->dk", g, pb)
            _accumulate(attn, full)

    return _make(out, (p, attn), bw)


def head_mean(x: Tensor, num_heads: int) -> Tensor:
    n, width = x.shape
    d = width // num_heads
    out = x.values.reshape(n, num_heads, d).mean(axis=1)

    def bw(g):
        _accumulate(x, np.repeat(g[:, None, :] / num_heads, num_heads, axis=1).reshape(n, width))

    return _make(out, (x,), bw)


def readout(h: Tensor, kind: str, segments: np.ndarray, num_graphs: int | None = None) -> Tensor:
    """Column-wise max/mean/sum of node rows per graph.

    ``segments`` gives each node's graph id; ids must be sorted.
    """
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != h.shape[0]:
        raise ValueError("one segment id per node row is required")
    if segments.size and np.any(np.diff(segments) < 0):
        raise ValueError("segments must be sorted and contiguous")
    num_graphs = int(segments.max()) + 1 if num_graphs is None else num_graphs
    counts = np.bincount(segments, minlength=num_graphs)
    if (counts == 0).any():
        raise ValueError(f"empty segment for graph {int(np.flatnonzero(counts == 0)[0])}")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    v = h.values
    if kind == "sum":
        out = np.add.reduceat(v, starts, axis=0)
        return _make(out, (h,), lambda g: _accumulate(h, g[segments]))
    if kind == "mean":
        out = np.add.reduceat(v, starts, axis=0) / counts[:, None]
        return _make(out, (h,), lambda g: _accumulate(h, (g / counts[:, None])[segments]))
    if kind == "max":
        out = np.maximum.reduceat(v, starts, axis=0)
        # first row within each segment that attains the column max
        hits = v == out[segments]
        pos = np.arange(v.shape[0])[:, None]
        first = np.full(out.shape, v.shape[0])
        np.minimum.at(first, segments, np.where(hits, pos, v.shape[0]))

        def bw(g):
            full = np.zeros_like(v)
            cols = np.broadcast_to(np.arange(v.shape[1]), first.shape)
            full[first, cols] = g
            _accumulate(h, full)

        return _make(out, (h,), bw)
    raise ValueError(f"unknown readout {kind!r}")


# ---------------------------------------------------------------- regularization


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.values * mask, (x,), lambda g: _accumulate(x, g * mask))


# ---------------------------------------------------------------- normalization


def center_cols(x: Tensor) -> Tensor:
    """Subtract the column mean (mean over rows) from every row."""
    out = x.values - x.values.mean(axis=0, keepdims=True)
    return _make(out, (x,), lambda g: _accumulate(x, g - g.mean(axis=0, keepdims=True)))


def normalize_rows(x: Tensor, s: float = 1.0) -> Tensor:
    """Rescale each row to Euclidean norm ``s``; zero rows stay zero."""
    norms = np.linalg.norm(x.values, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    u = x.values / safe

    def bw(g):
        proj = (g * u).sum(axis=1, keepdims=True)
        gx = s * (g - u * proj) / safe
        _accumulate(x, np.where(norms > 0, gx, 0.0))

    return _make(s * u, (x,), bw)


def normalize_frobenius(x: Tensor, s: float = 1.0) -> Tensor:
    """x * s * sqrt(N) / ||x||_F; an all-zero input maps to zeros."""
    n = x.shape[0]
    norm = float(np.linalg.norm(x.values))
    if norm == 0.0:
        return _make(np.zeros_like(x.values), (x,), lambda g: None)
    c = s * np.sqrt(n)
    u = x.values / norm

    def bw(g):
        _accumulate(x, c * (g - u * np.sum(g * u)) / norm)

    return _make(c * u, (x,), bw)


# ---------------------------------------------------------------- losses


def _check_labels(labels: np.ndarray, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label index out of range [0, {num_classes})")
    return labels


def cross_entropy(z: Tensor, labels, reduction: str = "mean", from_logits: bool = True) -> Tensor:
    """-sum_c y_c log p_c per row, reduced by sum or mean.

    With ``from_logits`` the input is raw scores and the loss is a fused
    log-softmax + NLL. Otherwise rows are probabilities, clamped to
    [LOG_EPS, 1] before the log.
    """
    n, c = z.shape
    labels = _check_labels(labels, n, c)
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    denom = n if reduction == "mean" else 1
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    if from_logits:
        logp = log_softmax_rows(z.values)
        loss = -np.sum(onehot * logp) / denom
        p = np.exp(logp)
        return _make(np.array([[loss]]), (z,), lambda g: _accumulate(z, g[0, 0] * (p - onehot) / denom))
    clamped = np.clip(z.values, LOG_EPS, 1.0)
    loss = -np.sum(onehot * np.log(clamped)) / denom
    inside = (z.values >= LOG_EPS) & (z.values <= 1.0)

    def bw(g):
        _accumulate(z, g[0, 0] * np.where(inside, -onehot / clamped, 0.0) / denom)

    return _make(np.array([[loss]]), (z,), bw)


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if target.size != pred.values.size:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.values - target.reshape(pred.shape)
    n = diff.size
    return _make(np.array([[np.mean(diff ** 2)]]), (pred,), lambda g: _accumulate(pred, g[0, 0] * 2 * diff / n))


# ---------------------------------------------------------------- gradient checking


GRAD_CHECK_FLOOR = 1e-6


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` maps the input tensors to a scalar tensor and must be deterministic.
    Denominators are floored at ``GRAD_CHECK_FLOOR`` so entries whose true
    gradient is exactly zero are judged by absolute error instead of by
    central-difference roundoff.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    backward(f(*inputs))
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.values.reshape(-1)
            ga = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = f(*inputs).item()
                flat[i] = orig - step
                down = f(*inputs).item()
                flat[i] = orig
                num = (up - down) / (2 * step)
                err = abs(ga[i] - num) / max(GRAD_CHECK_FLOOR, abs(ga[i]) + abs(num))
                worst = max(worst, err)
    return worst

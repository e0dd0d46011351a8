"""Temporal-Causal Hypergraph: causal attention over time-stock nodes,
Top-K sparsification, ReTanh incidence learning, hypergraph convolution.

Nodes are (time, stock) pairs flattened time-major: row = t * N + n. The
causal mask forbids attending to strictly later times; masked scores are set
to MASK_VALUE, a finite stand-in for -inf chosen so that exp underflows to
exactly zero after row-max subtraction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .mage import MhaParams, init_mha
from .tensor import Tensor, uniform_param

MASK_VALUE = -1e30


@dataclass(frozen=True)
class TimeStockLayout:
    n_stocks: int
    n_steps: int

    @property
    def n_nodes(self) -> int:
        return self.n_stocks * self.n_steps

    def row(self, t: int, n: int) -> int:
        return t * self.n_stocks + n

    def times(self) -> np.ndarray:
        """Time index of each flattened row."""
        return np.repeat(np.arange(self.n_steps), self.n_stocks)

    def causal_mask(self) -> np.ndarray:
        """Boolean (T*N, T*N): True where attention is forbidden (later time)."""
        t = self.times()
        return t[None, :] > t[:, None]


@dataclass
class IncidenceMatrix:
    """Node-by-hyperedge membership values.

    tch kind: ReTanh range [0, 1). gph kind: column-stochastic, entries (0, 1).
    """

    values: Tensor
    kind: str

    def __post_init__(self):
        if self.kind not in ("tch", "gph"):
            raise ValueError(f"unknown incidence kind {self.kind!r}")


@dataclass
class TchParams:
    attn: MhaParams  # only Q/K are consumed: the score matrix is the product
    w1: Tensor       # (T*N, M1_hidden)
    w2: Tensor       # (M1_hidden, M1)
    p1: Tensor       # (D, D)


def init_tch(rng, d, n_nodes, m1, m1_hidden=None, heads=2, dtype=np.float64) -> TchParams:
    hidden = m1 if m1_hidden is None else m1_hidden
    return TchParams(
        attn=init_mha(rng, d, heads, dtype),
        w1=uniform_param(rng, (n_nodes, hidden), n_nodes, dtype),
        w2=uniform_param(rng, (hidden, m1), hidden, dtype),
        p1=uniform_param(rng, (d, d), d, dtype),
    )


def flatten_time_stock(z: Tensor) -> Tensor:
    """(N, T, D) -> (T*N, D), row t*N + n = z[n, t]."""
    n, t, d = z.shape
    return tz.reshape(tz.transpose(z, (1, 0, 2)), (t * n, d))


def unflatten_time_stock(z_flat: Tensor, layout: TimeStockLayout) -> Tensor:
    """Inverse of flatten_time_stock."""
    n, t = layout.n_stocks, layout.n_steps
    d = z_flat.shape[1]
    return tz.transpose(tz.reshape(z_flat, (t, n, d)), (1, 0, 2))


def causal_mha(z_flat: Tensor, p: MhaParams, layout: TimeStockLayout) -> Tensor:
    """Head-averaged masked score matrix over time-stock nodes.

    Entry (i, j) is the scaled q_i . k_j, averaged over heads, with
    MASK_VALUE added wherever time(j) > time(i). Same-time attention
    (self included) stays open. V and output projections play no part here.
    """
    m, d = z_flat.shape
    if m != layout.n_nodes:
        raise ValueError(f"z_flat has {m} rows, layout expects {layout.n_nodes}")
    dh = p.wq.shape[2]
    zb = tz.reshape(z_flat, (1, m, d))
    q = zb @ p.wq  # (h, M, dh)
    k = zb @ p.wk
    scores = (q @ tz.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    avg = tz.tmean(scores, axis=0)
    mask = layout.causal_mask()
    return avg + Tensor(np.where(mask, MASK_VALUE, 0.0))


def topk_sparsify(a: Tensor, k: int) -> Tensor:
    """Row softmax, then keep the K largest entries at their softmax values.

    No renormalization. Ties go to the lower column index (stable sort).
    Kept entries carry exact softmax gradients; dropped entries get zero.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    probs = tz.softmax(a, axis=1)
    kk = min(k, a.shape[1])
    order = np.argsort(-probs.data, axis=1, kind="stable")
    keep = np.zeros(a.shape, dtype=probs.dtype)
    np.put_along_axis(keep, order[:, :kk], 1.0, axis=1)
    return probs * Tensor(keep)


def retanh(x: Tensor) -> Tensor:
    """max(0, tanh(x)) in spirit: 0 for x <= 0, tanh(x) above."""
    gate = Tensor((x.data > 0).astype(x.dtype))
    return tz.tanh(x) * gate


def build_incidence_tch(a_topk: Tensor, w1: Tensor, w2: Tensor) -> IncidenceMatrix:
    """H = ReTanh(ReTanh(A_topk W1) W2); each node's sparse neighbor profile
    is mapped to hyperedge activations."""
    if a_topk.shape[1] != w1.shape[0]:
        raise ValueError(
            f"W1 expects {w1.shape[0]} columns in A_topk, got {a_topk.shape[1]}"
        )
    return IncidenceMatrix(retanh(retanh(a_topk @ w1) @ w2), kind="tch")


def tch_conv(h: IncidenceMatrix, z_flat: Tensor, p1: Tensor) -> Tensor:
    """ELU(H H^T z_flat P1); no degree normalization."""
    values = h.values
    if values.shape[0] != z_flat.shape[0]:
        raise ValueError(
            f"incidence has {values.shape[0]} nodes, z_flat has {z_flat.shape[0]} rows"
        )
    mixed = values @ (tz.transpose(values, (1, 0)) @ z_flat)
    return tz.elu(mixed @ p1)


def tch_propagate(z_flat: Tensor, p: TchParams, layout: TimeStockLayout, k: int) -> Tensor:
    """Full chain: causal scores -> Top-K -> incidence -> convolution."""
    a = causal_mha(z_flat, p.attn, layout)
    a_topk = topk_sparsify(a, k)
    h = build_incidence_tch(a_topk, p.w1, p.w2)
    return tch_conv(h, z_flat, p.p1)

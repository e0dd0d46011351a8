"""Global Probabilistic Hypergraph: soft column-stochastic incidence over
stocks, JSD-based hyperedge distinctiveness weights, weighted convolution.

Each hyperedge is a probability distribution over stocks (its incidence
column). A hyperedge earns weight by being *different* from the others:
its mean Jensen-Shannon divergence to all columns is z-scored and
softmaxed. The JSD path is kept differentiable through the incidence,
which is safe because column softmax never produces an exact zero."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tch import IncidenceMatrix, retanh
from .tensor import Tensor, uniform_param

# Below this population std the z-score is numerically meaningless; fall
# back to uniform weights instead of dividing by ~0.
DEGENERATE_STD = 1e-12


@dataclass
class HyperedgeWeights:
    """Per-hyperedge mean divergence (nats) and softmax weights."""

    mu: Tensor
    w: Tensor


@dataclass
class GphParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    p2: Tensor

    @property
    def n_hyperedges(self) -> int:
        return self.w2.data.shape[1]


def init_gph(rng: np.random.Generator, flat_dim: int, m2: int, hidden: int = 128) -> GphParams:
    if m2 < 1:
        raise ValueError(f"need at least one hyperedge, got m2={m2}")
    return GphParams(
        w1=uniform_param(rng, (flat_dim, hidden), fan_in=flat_dim),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=uniform_param(rng, (hidden, m2), fan_in=hidden),
        b2=Tensor(np.zeros(m2), requires_grad=True),
        p2=uniform_param(rng, (flat_dim, flat_dim), fan_in=flat_dim),
    )


def build_incidence_gph(g_flat: Tensor, params: GphParams) -> IncidenceMatrix:
    """Column-stochastic incidence: softmax over stocks of ReTanh(FFN(g))."""
    if g_flat.data.ndim != 2 or g_flat.data.shape[1] != params.w1.data.shape[0]:
        raise ValueError(
            f"g_flat shape {g_flat.data.shape} incompatible with "
            f"w1 {params.w1.data.shape}"
        )
    h = tz.gelu(tz.matmul(g_flat, params.w1) + params.b1)
    scores = retanh(tz.matmul(h, params.w2) + params.b2)
    return IncidenceMatrix(tz.softmax(scores, axis=0), kind="gph")


def _kl(p: np.ndarray, m: np.ndarray) -> float:
    # 0 * ln(0/x) -> 0 by continuity; p > 0 implies m >= p/2 > 0.
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / m[mask])))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats; symmetric, bounded by ln 2."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"need matching 1-D distributions, got {p.shape} and {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("distributions must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise ValueError("distributions must sum to 1")
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def _pairwise_jsd(h: Tensor) -> Tensor:
    """All-pairs JSD between incidence columns, differentiably.

    Entries must be strictly positive (softmax output is), so the safe-log
    masking in jsd() is unnecessary here.
    """
    n, m2 = h.data.shape
    cols = tz.transpose(h, (1, 0))  # (M2, N)
    p = tz.reshape(cols, (m2, 1, n))
    q = tz.reshape(cols, (1, m2, n))
    log_mid = tz.log((p + q) * 0.5)
    kl_p = tz.tsum(p * (tz.log(p) - log_mid), axis=2)
    kl_q = tz.tsum(q * (tz.log(q) - log_mid), axis=2)
    return (kl_p + kl_q) * 0.5


def hyperedge_weights(incidence: IncidenceMatrix) -> HyperedgeWeights:
    """Mean divergence per hyperedge, z-scored and softmaxed into weights.

    The self term of the mean is kept (it contributes 0). Identical columns
    give zero std, where the weights collapse to uniform.
    """
    if incidence.kind != "gph":
        raise ValueError(f"need gph incidence, got kind={incidence.kind!r}")
    h = incidence.values
    m2 = h.data.shape[1]
    mu = tz.tmean(_pairwise_jsd(h), axis=0)  # (M2,)
    mean = tz.tmean(mu)
    std = tz.sqrt(tz.tmean((mu - mean) * (mu - mean)))
    if float(std.data) < DEGENERATE_STD:
        w = Tensor(np.full(m2, 1.0 / m2))
    else:
        w = tz.softmax((mu - mean) / std, axis=0)
    return HyperedgeWeights(mu=mu, w=w)


def gph_conv(incidence: IncidenceMatrix, weights: HyperedgeWeights, g_flat: Tensor, p2: Tensor) -> Tensor:
    """Weighted hypergraph convolution: ELU(H diag(w) H^T g P2)."""
    hv = incidence.values
    n, m2 = hv.data.shape
    if weights.w.data.shape != (m2,):
        raise ValueError(f"weights shape {weights.w.data.shape} != ({m2},)")
    if g_flat.data.shape[0] != n:
        raise ValueError(f"g_flat has {g_flat.data.shape[0]} rows, incidence has {n}")
    if p2.data.shape != (g_flat.data.shape[1],) * 2:
        raise ValueError(f"p2 shape {p2.data.shape} does not match g_flat width")
    mix = tz.matmul(hv * weights.w, tz.transpose(hv, (1, 0)))  # (N, N)
    return tz.elu(tz.matmul(tz.matmul(mix, g_flat), p2))


def gph_propagate(g_flat: Tensor, params: GphParams) -> Tensor:
    """Incidence -> hyperedge weights -> convolution, in one call."""
    incidence = build_incidence_gph(g_flat, params)
    weights = hyperedge_weights(incidence)
    return gph_conv(incidence, weights, g_flat, params.p2)

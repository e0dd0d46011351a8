"""Feature-wise and stock-wise 2D spatiotemporal attention.

Whole matrices attend to whole matrices: each feature is an N x T matrix
(feature-wise) or each stock a T x D matrix (stock-wise). Per pair, C channel
score matrices are flattened channel-major and fused to a scalar by a small
feed-forward network; softmax over the attended axis then mixes the V
projections. Channels are stacked last before the output projection, so the
flattened per-row vector is ordered [position, channel].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import Tensor, uniform_param


@dataclass
class Attn2DParams:
    """Per-channel projections plus the score-fusion FFN and output map.

    L is the projected axis length (T for feature-wise, D for stock-wise),
    Lp its reduced size, and the fusion input is C * A * A where A counts the
    attending objects (N features-wise pairs run over stocks and vice versa).
    """

    wq: Tensor  # (C, L, Lp)
    wk: Tensor  # (C, L, Lp)
    wv: Tensor  # (C, L, Lp)
    bq: Tensor  # (C, 1, Lp)
    bk: Tensor  # (C, 1, Lp)
    bv: Tensor  # (C, 1, Lp)
    fuse_w1: Tensor  # (C*A*A, H)
    fuse_b1: Tensor  # (H,)
    fuse_w2: Tensor  # (H, 1)
    fuse_b2: Tensor  # (1,)
    out_w: Tensor  # (Lp*C, L)
    out_b: Tensor  # (L,)

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @property
    def proj_len(self) -> int:
        return self.wq.shape[2]


def init_attn2d(
    rng,
    axis_len: int,
    pair_count: int,
    channels: int = 4,
    proj_len: int | None = None,
    fusion_hidden: int = 64,
    dtype=np.float64,
) -> Attn2DParams:
    """axis_len = T (feature-wise) or D (stock-wise); pair_count = N or T."""
    lp = math.ceil(axis_len / 2) if proj_len is None else proj_len
    if lp < 1:
        raise ValueError("projected length must be >= 1")
    fuse_in = channels * pair_count * pair_count
    u = lambda shape, fan: uniform_param(rng, shape, fan, dtype)
    return Attn2DParams(
        wq=u((channels, axis_len, lp), axis_len),
        wk=u((channels, axis_len, lp), axis_len),
        wv=u((channels, axis_len, lp), axis_len),
        bq=u((channels, 1, lp), axis_len),
        bk=u((channels, 1, lp), axis_len),
        bv=u((channels, 1, lp), axis_len),
        fuse_w1=u((fuse_in, fusion_hidden), fuse_in),
        fuse_b1=u((fusion_hidden,), fuse_in),
        fuse_w2=u((fusion_hidden, 1), fusion_hidden),
        fuse_b2=u((1,), fusion_hidden),
        out_w=u((lp * channels, axis_len), lp * channels),
        out_b=u((axis_len,), lp * channels),
    )


def _project(zb: Tensor, w: Tensor, b: Tensor, c: int, axis_len: int, lp: int) -> Tensor:
    w4 = tz.reshape(w, (c, 1, axis_len, lp))
    b4 = tz.reshape(b, (c, 1, 1, lp))
    return zb @ w4 + b4


def _fused_attention(scores: Tensor, p: Attn2DParams, rows: int) -> Tensor:
    # scores: (C, A, A, *, *) -> flatten channel-major per pair, fuse, softmax over j
    c = scores.shape[0]
    per_pair = c * scores.shape[3] * scores.shape[4]
    if p.fuse_w1.shape[0] != per_pair:
        raise ValueError(
            f"fusion network expects input {p.fuse_w1.shape[0]}, got {per_pair}"
        )
    flat = tz.reshape(tz.transpose(scores, (1, 2, 0, 3, 4)), (rows, rows, per_pair))
    hidden = tz.gelu(flat @ p.fuse_w1 + p.fuse_b1)
    alpha = tz.reshape(hidden @ p.fuse_w2 + p.fuse_b2, (rows, rows))
    return tz.softmax(alpha, axis=1)


def featurewise_attention(z: Tensor, p: Attn2DParams) -> Tensor:
    """The D x D attention matrix over features (rows sum to 1)."""
    n, t, d = z.shape
    c, lp = p.channels, p.proj_len
    if p.wq.shape[1] != t:
        raise ValueError(f"params project axis length {p.wq.shape[1]}, input has T={t}")
    zb = tz.reshape(tz.transpose(z, (2, 0, 1)), (1, d, n, t))
    q = _project(zb, p.wq, p.bq, c, t, lp)  # (C, D, N, Lp)
    k = _project(zb, p.wk, p.bk, c, t, lp)
    q5 = tz.reshape(q, (c, d, 1, n, lp))
    k5 = tz.reshape(tz.transpose(k, (0, 1, 3, 2)), (c, 1, d, lp, n))
    scores = (q5 @ k5) * (1.0 / math.sqrt(lp))  # (C, D, D, N, N)
    return _fused_attention(scores, p, d)


def featurewise_2d(z: Tensor, p: Attn2DParams) -> Tensor:
    """Attention across features; each feature is an N x T matrix."""
    n, t, d = z.shape
    c, lp = p.channels, p.proj_len
    attn = featurewise_attention(z, p)
    zb = tz.reshape(tz.transpose(z, (2, 0, 1)), (1, d, n, t))
    v = _project(zb, p.wv, p.bv, c, t, lp)  # (C, D, N, Lp)
    vt = tz.transpose(v, (0, 2, 3, 1))  # (C, N, Lp, D_j)
    mixed = vt @ tz.transpose(attn, (1, 0))  # (C, N, Lp, D_i)
    stacked = tz.reshape(tz.transpose(mixed, (3, 1, 2, 0)), (d, n, lp * c))
    out = stacked @ p.out_w + p.out_b  # (D, N, T)
    return tz.transpose(out, (1, 2, 0))


def stockwise_attention(z: Tensor, p: Attn2DParams) -> Tensor:
    """The N x N attention matrix over stocks (rows sum to 1)."""
    n, t, d = z.shape
    c, lp = p.channels, p.proj_len
    if p.wq.shape[1] != d:
        raise ValueError(f"params project axis length {p.wq.shape[1]}, input has D={d}")
    zb = tz.reshape(z, (1, n, t, d))
    q = _project(zb, p.wq, p.bq, c, d, lp)  # (C, N, T, Lp)
    k = _project(zb, p.wk, p.bk, c, d, lp)
    q5 = tz.reshape(q, (c, n, 1, t, lp))
    k5 = tz.reshape(tz.transpose(k, (0, 1, 3, 2)), (c, 1, n, lp, t))
    scores = (q5 @ k5) * (1.0 / math.sqrt(lp))  # (C, N, N, T, T)
    return _fused_attention(scores, p, n)


def stockwise_2d(z: Tensor, p: Attn2DParams) -> Tensor:
    """Mirror of featurewise_2d along the stock dimension."""
    n, t, d = z.shape
    c, lp = p.channels, p.proj_len
    attn = stockwise_attention(z, p)
    zb = tz.reshape(z, (1, n, t, d))
    v = _project(zb, p.wv, p.bv, c, d, lp)  # (C, N, T, Lp)
    vt = tz.transpose(v, (0, 2, 3, 1))  # (C, T, Lp, N_j)
    mixed = vt @ tz.transpose(attn, (1, 0))  # (C, T, Lp, N_i)
    stacked = tz.reshape(tz.transpose(mixed, (3, 1, 2, 0)), (n, t, lp * c))
    return stacked @ p.out_w + p.out_b  # (N, T, D)

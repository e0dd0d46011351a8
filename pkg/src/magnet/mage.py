"""The MAGE block: bidirectional selective state-space scan, sigmoid gate
fusion, switched top-1 Mixture-of-Experts with capacity normalization, and
multi-head self-attention, each wrapped in residual + layer norm."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as tz
from .tensor import Tensor, uniform_param

DT_INIT_RANGE = (1e-3, 1e-1)


# -- parameter containers ---------------------------------------------------


@dataclass
class SsmParams:
    """One scan direction. Di = expand * D is the inner width; S the state size.

    The decay matrix is stored as a_log with A = -exp(a_log), so exp(delta * A)
    always lands in (0, 1) for the softplus-positive delta.
    """

    w_in: Tensor    # (D, Di)
    b_in: Tensor    # (Di,)
    conv_w: Tensor  # (W, Di) causal depthwise taps, index 0 oldest
    conv_b: Tensor  # (Di,)
    w_gate: Tensor  # (D, Di)
    b_gate: Tensor  # (Di,)
    w_delta: Tensor  # (Di, Di)
    b_delta: Tensor  # (Di,)
    w_b: Tensor     # (Di, S)
    w_c: Tensor     # (Di, S)
    a_log: Tensor   # (Di, S)
    d_skip: Tensor  # (Di,)
    w_out: Tensor   # (Di, D)
    b_out: Tensor   # (D,)


@dataclass
class GateParams:
    w_f: Tensor  # (D, D)
    w_b: Tensor  # (D, D)
    b_f: Tensor  # (D,)
    b_b: Tensor  # (D,)


@dataclass
class MoEParams:
    w_g: Tensor  # (D, E) gate
    w1: Tensor   # (E, D, H)
    b1: Tensor   # (E, H)
    w2: Tensor   # (E, H, D)
    b2: Tensor   # (E, D)
    capacity: float | None = None  # None -> (N*T)/E at call time

    @property
    def n_experts(self) -> int:
        return self.w_g.shape[1]


@dataclass
class MhaParams:
    wq: Tensor  # (h, D, d_h) stacked per head
    wk: Tensor  # (h, D, d_h)
    wv: Tensor  # (h, D, d_h)
    wo: Tensor  # (D, D)

    @property
    def n_heads(self) -> int:
        return self.wq.shape[0]


@dataclass
class MageParams:
    ssm_fwd: SsmParams
    ssm_bwd: SsmParams
    gate: GateParams
    moe: MoEParams
    mha: MhaParams
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ln3_g: Tensor
    ln3_b: Tensor


@dataclass
class MoeRouting:
    probs: Tensor            # (N, T, E) gate softmax
    p_hat: Tensor            # (N, T, E) one nonzero per token
    p_tilde: Tensor          # (N, T, E) capacity-normalized
    expert_index: np.ndarray  # (N, T) int


# -- initializers ------------------------------------------------------------


def init_ssm(rng, d, state=16, expand=2, conv_width=4, dtype=np.float64) -> SsmParams:
    di = expand * d
    u = lambda shape, fan: uniform_param(rng, shape, fan, dtype)
    # delta bias: softplus(b) log-uniform in DT_INIT_RANGE; a_log: -1..-S decays
    dt = np.exp(rng.uniform(np.log(DT_INIT_RANGE[0]), np.log(DT_INIT_RANGE[1]), size=di))
    b_delta = Tensor(np.log(np.expm1(dt)).astype(dtype), requires_grad=True)
    a_log = Tensor(
        np.tile(np.log(np.arange(1, state + 1, dtype=np.float64)), (di, 1)).astype(dtype),
        requires_grad=True,
    )
    return SsmParams(
        w_in=u((d, di), d),
        b_in=u((di,), d),
        conv_w=u((conv_width, di), conv_width),
        conv_b=u((di,), conv_width),
        w_gate=u((d, di), d),
        b_gate=u((di,), d),
        w_delta=u((di, di), di),
        b_delta=b_delta,
        w_b=u((di, state), di),
        w_c=u((di, state), di),
        a_log=a_log,
        d_skip=Tensor(np.ones(di, dtype=dtype), requires_grad=True),
        w_out=u((di, d), di),
        b_out=u((d,), di),
    )


def init_gate(rng, d, dtype=np.float64) -> GateParams:
    u = lambda shape: uniform_param(rng, shape, d, dtype)
    return GateParams(w_f=u((d, d)), w_b=u((d, d)), b_f=u((d,)), b_b=u((d,)))


def init_moe(rng, d, experts=4, hidden=None, capacity=None, dtype=np.float64) -> MoEParams:
    h = 2 * d if hidden is None else hidden
    return MoEParams(
        w_g=uniform_param(rng, (d, experts), d, dtype),
        w1=uniform_param(rng, (experts, d, h), d, dtype),
        b1=uniform_param(rng, (experts, h), d, dtype),
        w2=uniform_param(rng, (experts, h, d), h, dtype),
        b2=uniform_param(rng, (experts, d), h, dtype),
        capacity=capacity,
    )


def init_mha(rng, d, heads=2, dtype=np.float64) -> MhaParams:
    if d % heads:
        raise ValueError(f"embed dim {d} not divisible by head count {heads}")
    dh = d // heads
    return MhaParams(
        wq=uniform_param(rng, (heads, d, dh), d, dtype),
        wk=uniform_param(rng, (heads, d, dh), d, dtype),
        wv=uniform_param(rng, (heads, d, dh), d, dtype),
        wo=uniform_param(rng, (d, d), d, dtype),
    )


def init_mage(
    rng,
    d,
    state=16,
    expand=2,
    conv_width=4,
    experts=4,
    moe_hidden=None,
    capacity=None,
    heads=2,
    dtype=np.float64,
) -> MageParams:
    ones = lambda: Tensor(np.ones(d, dtype=dtype), requires_grad=True)
    zeros = lambda: Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    return MageParams(
        ssm_fwd=init_ssm(rng, d, state, expand, conv_width, dtype),
        ssm_bwd=init_ssm(rng, d, state, expand, conv_width, dtype),
        gate=init_gate(rng, d, dtype),
        moe=init_moe(rng, d, experts, moe_hidden, capacity, dtype),
        mha=init_mha(rng, d, heads, dtype),
        ln1_g=ones(), ln1_b=zeros(),
        ln2_g=ones(), ln2_b=zeros(),
        ln3_g=ones(), ln3_b=zeros(),
    )


# -- the scan ---------------------------------------------------------------


def selective_scan(x, delta, A, B, C) -> Tensor:
    """The SSM recurrence as a single autodiff primitive.

    h_t = exp(delta_t * A) * h_{t-1} + (delta_t B_t) x_t; y_t = C_t . h_t.
    Backed by the compiled kernel when available. x, delta: (N, T, Di);
    A: (Di, S); B, C: (N, T, S).
    """
    y, hs = kernels.scan_forward(x.data, delta.data, A.data, B.data, C.data)

    def bw(g):
        gx, gd, ga, gb, gc = kernels.scan_backward(
            x.data, delta.data, A.data, B.data, C.data, hs, np.ascontiguousarray(g)
        )
        tz._accum(x, gx)
        tz._accum(delta, gd)
        tz._accum(A, ga)
        tz._accum(B, gb)
        tz._accum(C, gc)

    return Tensor._make(y, (x, delta, A, B, C), bw)


def _causal_depthwise_conv(u: Tensor, conv_w: Tensor, conv_b: Tensor) -> Tensor:
    # tap k sees the input shifted back by (W-1-k) steps; zero history
    t_len = u.shape[1]
    width = conv_w.shape[0]
    acc = None
    for k in range(width):
        shift = width - 1 - k
        su = tz.pad_axis(u, axis=1, before=shift)[:, :t_len] if shift else u
        term = conv_w[k] * su
        acc = term if acc is None else acc + term
    return acc + conv_b


def ssm_scan(z: Tensor, params: SsmParams, direction: str = "forward") -> Tensor:
    """Selective scan over the time axis; causal by construction.

    Accepts (T, D) or (N, T, D); output matches the input rank.
    """
    if direction != "forward":
        raise ValueError("ssm_scan runs forward only; use bidirectional() for the reverse pass")
    squeeze = z.ndim == 2
    if squeeze:
        z = tz.reshape(z, (1,) + z.shape)
    u = z @ params.w_in + params.b_in
    x = tz.silu(_causal_depthwise_conv(u, params.conv_w, params.conv_b))
    delta = tz.softplus(x @ params.w_delta + params.b_delta)
    b_t = x @ params.w_b
    c_t = x @ params.w_c
    a = tz.neg(tz.exp(params.a_log))
    y = selective_scan(x, delta, a, b_t, c_t)
    y = y + params.d_skip * x
    y = y * tz.silu(z @ params.w_gate + params.b_gate)
    out = y @ params.w_out + params.b_out
    if squeeze:
        out = tz.reshape(out, out.shape[1:])
    return out


def bidirectional(z: Tensor, params_fwd: SsmParams, params_bwd: SsmParams):
    """(forward scan, time-reversed scan of the reversed input)."""
    time_axis = z.ndim - 2
    fwd = ssm_scan(z, params_fwd)
    bwd = tz.flip(ssm_scan(tz.flip(z, time_axis), params_bwd), time_axis)
    return fwd, bwd


def gate_fuse(fwd: Tensor, bwd: Tensor, p: GateParams, mode: str = "literal") -> Tensor:
    """Sigmoid gate over the two scan directions.

    literal: sigmoid(fwd W_f + b_f + bwd W_b + b_b).
    convex: g = that sigmoid; g * fwd + (1 - g) * bwd.
    """
    if fwd.shape != bwd.shape:
        raise ValueError("directional outputs must have matching shapes")
    g = tz.sigmoid(fwd @ p.w_f + p.b_f + bwd @ p.w_b + p.b_b)
    if mode == "literal":
        return g
    if mode == "convex":
        return g * fwd + (1.0 - g) * bwd
    raise ValueError(f"unknown gate mode {mode!r}")


# -- mixture of experts -------------------------------------------------------


def moe_route(z: Tensor, p: MoEParams) -> MoeRouting:
    """Top-1 routing with capacity normalization.

    p_hat keeps only the argmax expert's probability per token (ties to the
    lowest index); p_tilde rescales each expert's column to sum to the
    capacity C. An expert with no routed tokens keeps an all-zero column
    (safe denominator, zero gradient).
    """
    n, t, _ = z.shape
    e = p.n_experts
    probs = tz.softmax(z @ p.w_g, axis=-1)
    idx = np.argmax(probs.data, axis=-1)
    onehot = np.eye(e, dtype=z.dtype)[idx]
    p_hat = probs * Tensor(onehot)
    denom = tz.tsum(p_hat, axis=(0, 1), keepdims=True)
    safe = denom + Tensor((denom.data == 0).astype(z.dtype))
    cap = (n * t) / e if p.capacity is None else p.capacity
    p_tilde = cap * p_hat / safe
    return MoeRouting(probs=probs, p_hat=p_hat, p_tilde=p_tilde, expert_index=idx)


def moe_apply(z: Tensor, routing: MoeRouting, p: MoEParams, scale_output: bool = True) -> Tensor:
    """Apply each token's selected expert (two-layer GELU network).

    Every expert is evaluated on all tokens and combined under the routing
    mask; exact gradients, fine at desk scale. scale_output multiplies by
    p_tilde; off reproduces the unscaled selection.
    """
    out = None
    for e in range(p.n_experts):
        h = tz.gelu(z @ p.w1[e] + p.b1[e])
        y_e = h @ p.w2[e] + p.b2[e]
        if scale_output:
            w = routing.p_tilde[:, :, e : e + 1]
        else:
            w = Tensor((routing.expert_index == e).astype(z.dtype)[:, :, None])
        term = w * y_e
        out = term if out is None else out + term
    return out


# -- attention ----------------------------------------------------------------


def mha(z: Tensor, p: MhaParams, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention along the time axis, per stock.

    mask, when given, is added to the pre-softmax scores (broadcast over
    batch and heads).
    """
    n, t, d = z.shape
    heads = p.n_heads
    dh = d // heads
    zb = tz.reshape(z, (n, 1, t, d))
    q = zb @ p.wq  # (N, h, T, dh)
    k = zb @ p.wk
    v = zb @ p.wv
    scores = (q @ tz.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + Tensor(np.asarray(mask, dtype=z.dtype))
    attn = tz.softmax(scores, axis=-1)
    mixed = attn @ v  # (N, h, T, dh)
    concat = tz.reshape(tz.transpose(mixed, (0, 2, 1, 3)), (n, t, d))
    return concat @ p.wo


# -- the block -----------------------------------------------------------------


def _maybe_dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate > 0.0 and rng is not None:
        return tz.dropout(x, rate, rng)
    return x


def mage_block(
    z: Tensor,
    params: MageParams,
    gate_mode: str = "literal",
    moe_scale_output: bool = True,
    dropout_rate: float = 0.0,
    rng=None,
) -> Tensor:
    """One MAGE block; output shape equals input shape (N, T, D)."""
    fwd, bwd = bidirectional(z, params.ssm_fwd, params.ssm_bwd)
    fused = _maybe_dropout(gate_fuse(fwd, bwd, params.gate, mode=gate_mode), dropout_rate, rng)
    z = tz.layer_norm(z + fused, params.ln1_g, params.ln1_b)
    routing = moe_route(z, params.moe)
    moe_out = _maybe_dropout(
        moe_apply(z, routing, params.moe, scale_output=moe_scale_output), dropout_rate, rng
    )
    z = tz.layer_norm(z + moe_out, params.ln2_g, params.ln2_b)
    attn = _maybe_dropout(mha(z, params.mha), dropout_rate, rng)
    return tz.layer_norm(z + attn, params.ln3_g, params.ln3_b)

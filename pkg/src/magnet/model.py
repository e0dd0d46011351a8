"""Pipeline assembly: embedding, MAGE stack, feature-wise 2D attention,
temporal-causal hypergraph, stock-wise 2D attention, global probabilistic
hypergraph, prediction head; plus the training loop.

Every stage is wrapped in residual + layer norm (MAGE blocks carry their
own wraps internally). Ablation flags turn stages into identity
pass-throughs; the stock-wise attention is toggled together with the
global hypergraph it feeds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .attn2d import featurewise_2d, init_attn2d, stockwise_2d
from .data import MarketPanel, PanelSplits, make_labels
from .gph import gph_propagate, init_gph
from .mage import init_mage, mage_block
from .tch import (
    TimeStockLayout,
    flatten_time_stock,
    init_tch,
    tch_propagate,
    unflatten_time_stock,
)
from .tensor import Tensor, named_tensors, uniform_param

PROB_FLOOR = 1e-12


@dataclass
class ModelConfig:
    n_stocks: int
    n_features: int
    window: int = 10
    d: int = 32
    state: int = 16
    expand: int = 2
    conv_width: int = 4
    experts: int = 4
    heads: int = 2
    channels: int = 4
    mage_layers: int = 1
    f2d_layers: int = 1
    tch_layers: int = 1
    s2d_layers: int = 1
    gph_layers: int = 1
    m1: int = 64
    m2: int = 32
    k: int = 64
    fusion_hidden: int = 64
    gph_hidden: int = 128
    dropout: float = 0.1
    use_mage: bool = True
    use_f2d: bool = True
    use_tch: bool = True
    use_gph: bool = True
    gate_mode: str = "literal"
    moe_scale_output: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.n_stocks, self.n_features, self.window) < 1:
            raise ValueError("n_stocks, n_features and window must be positive")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if not 1 <= self.k <= self.window * self.n_stocks:
            raise ValueError(
                f"k={self.k} outside [1, {self.window * self.n_stocks}]"
            )
        if self.m1 < 1 or self.m2 < 1:
            raise ValueError("m1 and m2 must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")

    @property
    def flat_dim(self) -> int:
        return self.window * self.d


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_epochs: int = 30
    patience: int = 5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")


@dataclass
class Wrapped:
    """A stage parameter bundle plus its residual layer-norm pair."""

    inner: object
    ln_g: Tensor
    ln_b: Tensor


@dataclass
class ModelParams:
    embed_w: Tensor
    embed_b: Tensor
    mage: list
    f2d: list
    tch: list
    s2d: list
    gph: list
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor


def _wrap(inner, width: int) -> Wrapped:
    return Wrapped(
        inner=inner,
        ln_g=Tensor(np.ones(width), requires_grad=True),
        ln_b=Tensor(np.zeros(width), requires_grad=True),
    )


def init_params(config: ModelConfig) -> ModelParams:
    c = config
    rng = np.random.default_rng([c.seed, 0])
    n_nodes = c.window * c.n_stocks
    return ModelParams(
        embed_w=uniform_param(rng, (c.n_features, c.d), c.n_features),
        embed_b=Tensor(np.zeros(c.d), requires_grad=True),
        mage=[
            init_mage(rng, c.d, c.state, c.expand, c.conv_width, c.experts,
                      heads=c.heads)
            for _ in range(c.mage_layers)
        ],
        f2d=[
            _wrap(init_attn2d(rng, axis_len=c.window, pair_count=c.n_stocks,
                              channels=c.channels, fusion_hidden=c.fusion_hidden), c.d)
            for _ in range(c.f2d_layers)
        ],
        tch=[
            _wrap(init_tch(rng, c.d, n_nodes, c.m1, heads=c.heads), c.d)
            for _ in range(c.tch_layers)
        ],
        s2d=[
            _wrap(init_attn2d(rng, axis_len=c.d, pair_count=c.window,
                              channels=c.channels, fusion_hidden=c.fusion_hidden), c.d)
            for _ in range(c.s2d_layers)
        ],
        gph=[
            _wrap(init_gph(rng, c.flat_dim, c.m2, hidden=c.gph_hidden), c.flat_dim)
            for _ in range(c.gph_layers)
        ],
        head_w1=uniform_param(rng, (c.flat_dim, c.d), c.flat_dim),
        head_b1=Tensor(np.zeros(c.d), requires_grad=True),
        head_w2=uniform_param(rng, (c.d, 2), c.d),
        head_b2=Tensor(np.zeros(2), requires_grad=True),
    )


def embed(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Shared affine map F -> D with GELU, applied per (stock, day)."""
    if x.data.ndim != 3 or x.data.shape[2] != w.data.shape[0]:
        raise ValueError(f"input {x.data.shape} incompatible with embed {w.data.shape}")
    return tz.gelu(tz.matmul(x, w) + b)


def _maybe_drop(x: Tensor, rate: float, rng) -> Tensor:
    return tz.dropout(x, rate, rng) if rate > 0 and rng is not None else x


def forward(
    x,
    config: ModelConfig,
    params: ModelParams,
    training: bool = False,
    rng=None,
) -> Tensor:
    """Full pipeline; returns per-stock class probabilities (N, 2)."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    n, t, f = x.data.shape
    if (n, t, f) != (config.n_stocks, config.window, config.n_features):
        raise ValueError(
            f"input {x.data.shape} does not match config "
            f"({config.n_stocks}, {config.window}, {config.n_features})"
        )
    rate = config.dropout if training else 0.0

    z = embed(x, params.embed_w, params.embed_b)
    if config.use_mage:
        for blk in params.mage:
            z = mage_block(z, blk, gate_mode=config.gate_mode,
                           moe_scale_output=config.moe_scale_output,
                           dropout_rate=rate, rng=rng)
    if config.use_f2d:
        for layer in params.f2d:
            out = _maybe_drop(featurewise_2d(z, layer.inner), rate, rng)
            z = tz.layer_norm(z + out, layer.ln_g, layer.ln_b)
    if config.use_tch:
        layout = TimeStockLayout(n_stocks=n, n_steps=t)
        for layer in params.tch:
            z_flat = flatten_time_stock(z)
            out = tch_propagate(z_flat, layer.inner, layout, config.k)
            out = _maybe_drop(unflatten_time_stock(out, layout), rate, rng)
            z = tz.layer_norm(z + out, layer.ln_g, layer.ln_b)
    g_flat = None
    if config.use_gph:  # stock-wise attention exists to feed the GPH
        for layer in params.s2d:
            out = _maybe_drop(stockwise_2d(z, layer.inner), rate, rng)
            z = tz.layer_norm(z + out, layer.ln_g, layer.ln_b)
        g_flat = tz.reshape(z, (n, t * z.data.shape[2]))
        for layer in params.gph:
            out = _maybe_drop(gph_propagate(g_flat, layer.inner), rate, rng)
            g_flat = tz.layer_norm(g_flat + out, layer.ln_g, layer.ln_b)
    else:
        g_flat = tz.reshape(z, (n, t * z.data.shape[2]))

    hidden = tz.gelu(tz.matmul(g_flat, params.head_w1) + params.head_b1)
    logits = tz.matmul(hidden, params.head_w2) + params.head_b2
    return tz.softmax(logits, axis=1)


def loss(probs: Tensor, labels) -> Tensor:
    """Mean cross-entropy against {0,1} labels, probability floored."""
    labels = np.asarray(labels)
    n = probs.data.shape[0]
    if probs.data.ndim != 2 or probs.data.shape[1] != 2:
        raise ValueError(f"probs must be (N, 2), got {probs.data.shape}")
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    onehot = np.zeros((n, 2))
    onehot[np.arange(n), labels] = 1.0
    p_true = tz.tsum(probs * Tensor(onehot), axis=1)
    return -tz.tmean(tz.log(tz.maximum_const(p_true, PROB_FLOOR)))


class AdamW:
    """Adaptive moments with decoupled weight decay; parameters whose
    gradient is absent on a step are skipped (lazy, standard)."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = list(params)  # (name, Tensor) pairs
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            m_hat = m / (1 - self.b1**self.t)
            v_hat = v / (1 - self.b2**self.t)
            p.data = p.data - self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )


def day_windows(panel: MarketPanel, window: int):
    """Sliding (features, labels) samples; never crosses the panel edge.

    Position t yields the lookback [t-window+1, t] and the label for the
    move t -> t+1, so the last day of the panel only ever serves as a
    label source.
    """
    if panel.n_days < window + 1:
        raise ValueError(
            f"panel has {panel.n_days} days, need > {window} for one sample"
        )
    labels = make_labels(panel.closes)
    for t in range(window - 1, panel.n_days - 1):
        yield t, panel.features[:, t - window + 1 : t + 1], labels[:, t]


def _snapshot(named):
    return {name: p.data.copy() for name, p in named}


def _restore(named, snap):
    for name, p in named:
        p.data = snap[name].copy()


def evaluate_accuracy(panel: MarketPanel, config: ModelConfig, params: ModelParams) -> float:
    """Directional accuracy over all day-windows of a panel."""
    hits = total = 0
    with tz.no_grad():
        for _, x, labels in day_windows(panel, config.window):
            probs = forward(x, config, params)
            hits += int(np.sum(np.argmax(probs.data, axis=1) == labels))
            total += labels.size
    return hits / total


def train(
    splits: PanelSplits,
    config: ModelConfig,
    tcfg: TrainConfig | None = None,
    params: ModelParams | None = None,
):
    """Windowed training with early stopping on validation accuracy.

    Returns (params, history); params are the best-validation snapshot.
    Deterministic for a fixed config seed.
    """
    tcfg = tcfg or TrainConfig()
    params = params or init_params(config)
    named = named_tensors(params)
    opt = AdamW(named, lr=tcfg.lr, betas=tcfg.betas, eps=tcfg.eps,
                weight_decay=tcfg.weight_decay)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])

    train_samples = list(day_windows(splits.train, config.window))
    if not train_samples:
        raise ValueError("train split yields no windows")
    list(day_windows(splits.val, config.window))  # raises if val is too short

    best_acc = -1.0
    best_snap = _snapshot(named)
    bad_epochs = 0
    history = []
    for epoch in range(1, tcfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_samples))
        losses = []
        for idx in order:
            t, x, labels = train_samples[idx]
            probs = forward(x, config, params, training=True, rng=drop_rng)
            step_loss = loss(probs, labels)
            if not np.isfinite(step_loss.data):
                raise RuntimeError(
                    f"non-finite loss {step_loss.data!r} at epoch {epoch}, "
                    f"window t={t}"
                )
            tz.GradTape(step_loss).run()
            opt.step()
            losses.append(float(step_loss.data))
        val_acc = evaluate_accuracy(splits.val, config, params)
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_accuracy": val_acc}
        )
        if val_acc > best_acc:
            best_acc = val_acc
            best_snap = _snapshot(named)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= tcfg.patience:
                break
    _restore(named, best_snap)
    return params, history

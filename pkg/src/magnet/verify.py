"""Runtime invariant suite behind the `verify` subcommand.

Each check restates its oracle inline (finite differences, brute-force
simulation, dense matrix products) so a bug in an engine shortcut cannot
hide behind itself. Trial counts are sized to finish in seconds; the test
suite runs the same checks harder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import Tensor, named_tensors
from .mage import init_mha, init_moe, moe_route
from .tch import (
    TimeStockLayout,
    causal_mha,
    flatten_time_stock,
    init_tch,
    tch_conv,
    topk_sparsify,
)
from .gph import build_incidence_gph, gph_conv, hyperedge_weights, init_gph, jsd
from .model import ModelConfig, forward, init_params, loss
from .backtest import StrategyParams, run_backtest

LN2 = math.log(2.0)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _tiny_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(
        n_stocks=2, n_features=3, window=4, d=8, state=4, expand=2,
        conv_width=2, experts=2, heads=2, channels=2, m1=3, m2=3, k=4,
        fusion_hidden=8, gph_hidden=8, dropout=0.0, seed=seed,
    )


def check_gradients(seed: int = 0, n_coords: int = 24) -> CheckResult:
    """Analytic vs central-difference gradients through the full pipeline."""
    config = _tiny_config(seed)
    params = init_params(config)
    named = named_tensors(params)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(config.n_stocks, config.window, config.n_features))
    labels = rng.integers(0, 2, size=config.n_stocks)

    def objective() -> float:
        with tz.no_grad():
            return float(loss(forward(x, config, params), labels).data)

    out = loss(forward(x, config, params), labels)
    tz.GradTape(out).run()

    flat = [(name, p, i) for name, p in named for i in range(min(p.data.size, 4))]
    picks = rng.choice(len(flat), size=min(n_coords, len(flat)), replace=False)
    h = 1e-5
    worst = 0.0
    for pick in picks:
        name, p, i = flat[pick]
        if p.grad is None:  # unused projection heads carry no gradient
            continue
        orig = p.data.flat[i]
        p.data.flat[i] = orig + h
        up = objective()
        p.data.flat[i] = orig - h
        down = objective()
        p.data.flat[i] = orig
        numeric = (up - down) / (2 * h)
        analytic = p.grad.flat[i]
        # absolute error below unit gradient scale, relative above
        err = abs(analytic - numeric) / max(1.0, abs(analytic))
        worst = max(worst, err)
    passed = worst < 1e-4
    return CheckResult("gradient fidelity", passed, f"max rel err {worst:.2e}")


def check_causality(seed: int = 0, trials: int = 100) -> CheckResult:
    """Perturbing a node must not move attention rows of earlier times."""
    rng = np.random.default_rng(seed + 2)
    for trial in range(trials):
        t = int(rng.integers(2, 7))
        n = int(rng.integers(1, 60 // t + 1))
        layout = TimeStockLayout(n_stocks=n, n_steps=t)
        p = init_mha(rng, d=4, heads=2)
        z = rng.normal(size=(n, t, 4))
        with tz.no_grad():
            base = causal_mha(flatten_time_stock(Tensor(z)), p, layout).data
            t0 = int(rng.integers(0, t))
            j = int(rng.integers(0, n))
            bumped = z.copy()
            bumped[j, t0] += rng.normal(size=4)
            new = causal_mha(flatten_time_stock(Tensor(bumped)), p, layout).data
        earlier = layout.times() < t0  # rows strictly before the bump
        if not np.array_equal(base[earlier], new[earlier]):
            return CheckResult(
                "attention causality", False,
                f"trial {trial}: row before t={t0} moved",
            )
    return CheckResult("attention causality", True, f"{trials} perturbation trials")


def check_stochasticity(seed: int = 0, pairs: int = 1000) -> CheckResult:
    """GPH column sums, weight normalization and JSD range."""
    rng = np.random.default_rng(seed + 3)
    for trial in range(20):
        n = int(rng.integers(2, 9))
        flat_dim = int(rng.integers(3, 12))
        m2 = int(rng.integers(2, 6))
        params = init_gph(rng, flat_dim, m2, hidden=7)
        g = Tensor(rng.normal(size=(n, flat_dim)))
        with tz.no_grad():
            h = build_incidence_gph(g, params)
            w = hyperedge_weights(h)
        csums = h.values.data.sum(axis=0)
        if np.any(np.abs(csums - 1.0) > 1e-9):
            return CheckResult("gph stochasticity", False,
                               f"trial {trial}: column sum off by "
                               f"{np.abs(csums - 1).max():.2e}")
        if abs(float(w.w.data.sum()) - 1.0) > 1e-9:
            return CheckResult("gph stochasticity", False,
                               f"trial {trial}: weights sum {w.w.data.sum()!r}")
    for _ in range(pairs):
        k = int(rng.integers(2, 12))
        p = rng.dirichlet(np.ones(k))
        q = rng.dirichlet(np.ones(k))
        d = jsd(p, q)
        if not 0.0 <= d <= LN2 + 1e-12:
            return CheckResult("gph stochasticity", False, f"jsd {d!r} out of range")
    one_hot = abs(jsd([1.0, 0.0], [0.0, 1.0]) - LN2)
    if one_hot > 1e-12:
        return CheckResult("gph stochasticity", False,
                           f"disjoint jsd misses ln2 by {one_hot:.2e}")
    return CheckResult("gph stochasticity", True,
                       f"{pairs} jsd pairs, 20 incidence draws")


def check_topk(seed: int = 0, trials: int = 100) -> CheckResult:
    """Top-K rows: at most K nonzeros, each the untouched softmax value."""
    rng = np.random.default_rng(seed + 4)
    for trial in range(trials):
        rows = int(rng.integers(1, 12))
        cols = int(rng.integers(1, 12))
        k = int(rng.integers(1, cols + 1))
        a = rng.normal(size=(rows, cols)) * 3
        with tz.no_grad():
            sparse = topk_sparsify(Tensor(a), k).data
        ex = np.exp(a - a.max(axis=1, keepdims=True))
        dense = ex / ex.sum(axis=1, keepdims=True)
        if np.any((sparse != 0).sum(axis=1) > k):
            return CheckResult("top-k sparsify", False, f"trial {trial}: > {k} kept")
        kept = sparse != 0
        if np.any(np.abs(sparse[kept] - dense[kept]) > 1e-9):
            return CheckResult("top-k sparsify", False,
                               f"trial {trial}: kept value drifted")
    return CheckResult("top-k sparsify", True, f"{trials} random matrices")


def check_moe(seed: int = 0, trials: int = 100) -> CheckResult:
    """One expert per token; routed experts' masses sum to capacity."""
    rng = np.random.default_rng(seed + 5)
    for trial in range(trials):
        n = int(rng.integers(1, 5))
        t = int(rng.integers(1, 6))
        d = 4
        e = int(rng.integers(2, 5))
        p = init_moe(rng, d, experts=e)
        z = Tensor(rng.normal(size=(n, t, d)))
        with tz.no_grad():
            routing = moe_route(z, p)
        if np.any((routing.p_hat.data != 0).sum(axis=-1) != 1):
            return CheckResult("moe routing", False,
                               f"trial {trial}: token with != 1 expert")
        cap = n * t / e
        mass = routing.p_tilde.data.sum(axis=(0, 1))
        routed = routing.p_hat.data.sum(axis=(0, 1)) > 0
        if np.any(np.abs(mass[routed] - cap) > 1e-9):
            return CheckResult("moe routing", False,
                               f"trial {trial}: capacity off by "
                               f"{np.abs(mass[routed] - cap).max():.2e}")
    return CheckResult("moe routing", True, f"{trials} random routings")


def check_conv_oracles(seed: int = 0, trials: int = 50) -> CheckResult:
    """tch_conv and gph_conv against naive dense triple products."""
    rng = np.random.default_rng(seed + 6)

    def elu(x):
        return np.where(x > 0, x, np.expm1(x))

    for trial in range(trials):
        nodes = int(rng.integers(2, 33))
        d = 2 * int(rng.integers(1, 4))  # head count divides d
        m = int(rng.integers(2, 7))
        tchp = init_tch(rng, d, nodes, m)
        z = Tensor(rng.normal(size=(nodes, d)))
        hv = np.abs(rng.normal(size=(nodes, m)))
        from .tch import IncidenceMatrix

        with tz.no_grad():
            got = tch_conv(IncidenceMatrix(Tensor(hv), kind="tch"), z, tchp.p1).data
        want = elu(hv @ hv.T @ z.data @ tchp.p1.data)
        if np.abs(got - want).max() > 1e-9:
            return CheckResult("hyperconv oracle", False,
                               f"trial {trial}: tch off by "
                               f"{np.abs(got - want).max():.2e}")

        gphp = init_gph(rng, d, m, hidden=5)
        g = Tensor(rng.normal(size=(nodes, d)))
        with tz.no_grad():
            h = build_incidence_gph(g, gphp)
            w = hyperedge_weights(h)
            got2 = gph_conv(h, w, g, gphp.p2).data
        hvals = h.values.data
        want2 = elu(hvals @ np.diag(w.w.data) @ hvals.T @ g.data @ gphp.p2.data)
        if np.abs(got2 - want2).max() > 1e-9:
            return CheckResult("hyperconv oracle", False,
                               f"trial {trial}: gph off by "
                               f"{np.abs(got2 - want2).max():.2e}")
    return CheckResult("hyperconv oracle", True, f"{trials} dense comparisons")


def check_backtest_oracle(seed: int = 0, trials: int = 50) -> CheckResult:
    """Engine vs a literal re-simulation of the daily trading rule."""
    rng = np.random.default_rng(seed + 7)
    for trial in range(trials):
        n = int(rng.integers(1, 6))
        days = int(rng.integers(1, 11))
        probs = rng.uniform(size=(days, n))
        prices = rng.uniform(2.0, 80.0, size=(days + 1, n))
        p = round(0.05 * int(rng.integers(1, 21)), 2)
        q = round(0.05 * int(rng.integers(1, 20)), 2)
        r = round(0.05 * int(rng.integers(0, 21)), 2)
        params = StrategyParams(p=p, q=q, r=r, tau=0.0025, capital=1e6)
        state = run_backtest(probs, prices, params)

        cash, shares = 1e6, [0.0] * n
        values = [1e6]
        tickers = [f"S{i:03d}" for i in range(n)]
        for d in range(days):
            today = prices[d]
            m = sum(1 for v in probs[d] if v > 0.5)
            pn = p * n
            if m >= pn - 1e-9:
                n_t = int(math.floor(pn + 1e-9))
            elif m >= pn * q - 1e-9:
                n_t = int(math.floor(r * m + 1e-9))
            else:
                n_t = 0
            total = cash + sum(shares[i] * today[i] for i in range(n))
            dust = 1e-6 * total
            order = sorted(range(n), key=lambda i: (-probs[d][i], tickers[i]))
            targets = set(order[:n_t]) if n_t else set()
            for i in range(n):
                if i not in targets and shares[i] > 0:
                    cash += shares[i] * today[i] * (1 - params.tau)
                    shares[i] = 0.0
            if targets:
                tv = (cash + sum(shares[i] * today[i] for i in targets)) / n_t
                for i in sorted(targets):
                    excess = shares[i] * today[i] - tv
                    if excess >= dust:
                        shares[i] -= excess / today[i]
                        cash += excess * (1 - params.tau)
                buys = [
                    (i, tv - shares[i] * today[i])
                    for i in sorted(targets)
                    if tv - shares[i] * today[i] >= dust
                ]
                gross = sum(b * (1 + params.tau) for _, b in buys)
                scale = min(1.0, cash / gross) if gross > 0 else 0.0
                for i, b in buys:
                    shares[i] += b * scale / today[i]
                    cash -= b * scale * (1 + params.tau)
                cash = max(cash, 0.0)
            values.append(cash + sum(shares[i] * prices[d + 1][i] for i in range(n)))
        final_err = abs(state.values[-1] - values[-1]) / values[-1]
        if final_err > 1e-9:
            return CheckResult("backtest oracle", False,
                               f"trial {trial}: final value off by {final_err:.2e}")
    return CheckResult("backtest oracle", True, f"{trials} simulated instances")


def check_metric_examples() -> CheckResult:
    """Frozen metric values that must hold exactly."""
    from .backtest import backtest_metrics, classification_metrics

    mdd1 = backtest_metrics([100.0, 80.0, 90.0]).mdd
    mdd2 = backtest_metrics([100.0, 120.0, 90.0, 130.0]).mdd
    flat = backtest_metrics([100.0, 100.0, 100.0])
    auc = classification_metrics([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc
    problems = []
    if abs(mdd1 + 0.20) > 1e-15:
        problems.append(f"mdd [100,80,90] = {mdd1!r}")
    if abs(mdd2 + 0.25) > 1e-15:
        problems.append(f"mdd [100,120,90,130] = {mdd2!r}")
    if flat.ar != 0.0 or flat.sr is not None or not flat.sr_undefined:
        problems.append("flat series not flagged")
    if auc != 1.0:
        problems.append(f"perfect ranking auc = {auc!r}")
    if problems:
        return CheckResult("metric examples", False, "; ".join(problems))
    return CheckResult("metric examples", True, "drawdown, flat-series, auc")


def run_all_checks(seed: int = 0) -> list:
    return [
        check_gradients(seed),
        check_causality(seed),
        check_stochasticity(seed),
        check_topk(seed),
        check_moe(seed),
        check_conv_oracles(seed),
        check_backtest_oracle(seed),
        check_metric_examples(),
    ]


def format_report(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [
        f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}"
        for r in results
    ]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results)} checks, {failed} failed")
    return "\n".join(lines)

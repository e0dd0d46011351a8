"""Dynamic daily trading backtest and evaluation metrics.

The strategy re-selects a target basket every day from the predicted rise
probabilities (three-regime rule with a stop-loss branch), liquidates
everything outside it, and rebalances the rest toward equal capital.
Costs are proportional on both sides: sells credit notional*(1-tau), buys
debit notional*(1+tau), and buys are scaled down so cash never goes
negative. Fractional shares are allowed; equal-capital allocation is
unattainable otherwise."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

# Float-dust guard for the floor() and regime thresholds: p*N is often an
# exact integer in intent (0.15 * 20) but not in binary.
EPS = 1e-9
TRADING_DAYS = 252
RISK_FREE = 0.02
# Rebalance legs smaller than this fraction of portfolio value are skipped
# so costs do not compound on allocation dust. Full liquidations always run.
DUST_FRACTION = 1e-6


@dataclass(frozen=True)
class StrategyParams:
    p: float = 0.15
    q: float = 0.5
    r: float = 0.5
    tau: float = 0.0025
    capital: float = 1_000_000.0

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ValueError(f"p={self.p} outside (0, 1]")
        if not 0 < self.q < 1:
            raise ValueError(f"q={self.q} outside (0, 1)")
        if not 0 <= self.r <= 1:
            raise ValueError(f"r={self.r} outside [0, 1]")
        if self.tau < 0 or self.capital <= 0:
            raise ValueError("tau must be >= 0 and capital > 0")


@dataclass
class Trade:
    day: int
    ticker: str
    side: str
    shares: float
    price: float
    cost: float


@dataclass
class PortfolioState:
    cash: float
    holdings: np.ndarray  # shares per stock, fractional
    values: list = field(default_factory=list)
    trades: list = field(default_factory=list)

    @classmethod
    def initial(cls, n_stocks: int, params: StrategyParams) -> "PortfolioState":
        return cls(
            cash=params.capital,
            holdings=np.zeros(n_stocks),
            values=[params.capital],
        )


def _floor(x: float) -> int:
    return int(math.floor(x + EPS))


def select_count(m: int, n_stocks: int, params: StrategyParams) -> int:
    """The three-regime target count: full basket, conservative, stop-loss."""
    pn = params.p * n_stocks
    if m >= pn - EPS:
        return _floor(pn)
    if m >= pn * params.q - EPS:
        return _floor(params.r * m)
    return 0


def default_tickers(n: int) -> list:
    return [f"S{i:03d}" for i in range(n)]


def daily_step(
    probs: np.ndarray,
    prices_today: np.ndarray,
    prices_next: np.ndarray,
    state: PortfolioState,
    params: StrategyParams,
    tickers: list | None = None,
    day: int = 0,
) -> PortfolioState:
    """One trading day: select, liquidate, rebalance, mark to market.

    Trades fill at today's close; the day's portfolio value is recorded at
    the next close. Sells run before buys so freed cash funds purchases.
    """
    probs = np.asarray(probs, dtype=np.float64)
    prices_today = np.asarray(prices_today, dtype=np.float64)
    prices_next = np.asarray(prices_next, dtype=np.float64)
    n = len(state.holdings)
    if probs.shape != (n,) or prices_today.shape != (n,) or prices_next.shape != (n,):
        raise ValueError("predictions and prices must match the portfolio width")
    if np.any(prices_today <= 0) or np.any(prices_next <= 0):
        raise ValueError("prices must be positive")
    tickers = tickers or default_tickers(n)

    def sell(i: int, shares: float, liquidate: bool = False):
        notional = shares * prices_today[i]
        cost = params.tau * notional
        state.cash += notional - cost
        state.holdings[i] = 0.0 if liquidate else state.holdings[i] - shares
        state.trades.append(
            Trade(day, tickers[i], "sell", shares, float(prices_today[i]), cost)
        )

    m = int(np.sum(probs > 0.5))
    n_t = select_count(m, n, params)
    total = state.cash + float(state.holdings @ prices_today)
    dust = DUST_FRACTION * total

    if n_t > 0:
        order = sorted(range(n), key=lambda i: (-probs[i], tickers[i]))
        targets = set(order[:n_t])
    else:
        targets = set()

    for i in range(n):
        if i not in targets and state.holdings[i] > 0:
            sell(i, float(state.holdings[i]), liquidate=True)

    if targets:
        held_value = sum(float(state.holdings[i]) * prices_today[i] for i in sorted(targets))
        target_value = (state.cash + held_value) / n_t
        for i in sorted(targets):
            excess = float(state.holdings[i]) * prices_today[i] - target_value
            if excess >= dust:
                sell(i, excess / float(prices_today[i]))
        buys = []
        for i in sorted(targets):
            deficit = target_value - float(state.holdings[i]) * prices_today[i]
            if deficit >= dust:
                buys.append((i, deficit))
        gross = sum(b * (1 + params.tau) for _, b in buys)
        scale = min(1.0, state.cash / gross) if gross > 0 else 0.0
        for i, deficit in buys:
            notional = deficit * scale
            shares = notional / float(prices_today[i])
            state.holdings[i] += shares
            state.cash -= notional * (1 + params.tau)
            state.trades.append(
                Trade(day, tickers[i], "buy", shares, float(prices_today[i]),
                      params.tau * notional)
            )
        state.cash = max(state.cash, 0.0)  # clear negative rounding residue

    state.values.append(state.cash + float(state.holdings @ prices_next))
    return state


def run_backtest(
    predictions: np.ndarray,
    prices: np.ndarray,
    params: StrategyParams,
    tickers: list | None = None,
) -> PortfolioState:
    """Sequential daily steps; needs one more price row than prediction rows."""
    predictions = np.asarray(predictions, dtype=np.float64)
    prices = np.asarray(prices, dtype=np.float64)
    if predictions.ndim != 2 or prices.ndim != 2:
        raise ValueError("predictions and prices must be 2-D (days, stocks)")
    days, n = predictions.shape
    if prices.shape != (days + 1, n):
        raise ValueError(
            f"prices shape {prices.shape} must be ({days + 1}, {n}): "
            "one trailing row to evaluate the last day"
        )
    if np.any(predictions < 0) or np.any(predictions > 1):
        raise ValueError("predictions must be probabilities in [0, 1]")
    tickers = tickers or default_tickers(n)
    state = PortfolioState.initial(n, params)
    for day in range(days):
        daily_step(predictions[day], prices[day], prices[day + 1], state, params,
                   tickers, day)
    return state


# -- metrics ---------------------------------------------------------------------


@dataclass
class ClassificationMetrics:
    acc: float
    pre: float
    rec: float
    f1: float
    auc: float
    auc_degenerate: bool = False


@dataclass
class BacktestMetrics:
    ar: float
    sr: float | None
    cr: float | None
    mdd: float
    returns: np.ndarray
    drawdowns: np.ndarray
    sr_undefined: bool
    cr_undefined: bool


def _tied_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties averaged."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def classification_metrics(probs, labels) -> ClassificationMetrics:
    """Threshold-0.5 confusion metrics plus rank-statistic AUC."""
    probs = np.asarray(probs, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if probs.size == 0:
        raise ValueError("empty input")
    if probs.shape != labels.shape:
        raise ValueError(f"shapes differ: {probs.shape} vs {labels.shape}")
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("probabilities outside [0, 1]")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    pred = probs > 0.5
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    tn = int(np.sum(~pred & ~pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    acc = (tp + tn) / len(labels)
    pre = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * pre * rec / (pre + rec) if pre + rec else 0.0

    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return ClassificationMetrics(acc, pre, rec, f1, 0.5, auc_degenerate=True)
    ranks = _tied_ranks(probs)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return ClassificationMetrics(acc, pre, rec, f1, u / (n_pos * n_neg))


def backtest_metrics(values) -> BacktestMetrics:
    """Annualized return, Sharpe, Calmar and max drawdown of a value series."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or len(v) < 2:
        raise ValueError(f"need a 1-D value series of length >= 2, got {v.shape}")
    if np.any(v <= 0):
        raise ValueError("portfolio values must be positive")
    returns = v[1:] / v[:-1] - 1.0
    t = len(returns)
    ar = float((v[-1] / v[0]) ** (TRADING_DAYS / t) - 1.0)
    sigma = float(returns.std(ddof=0)) * math.sqrt(TRADING_DAYS)
    running_max = np.maximum.accumulate(v)
    drawdowns = (v - running_max) / running_max
    mdd = float(drawdowns.min())
    sr = (ar - RISK_FREE) / sigma if sigma > 0 else None
    cr = ar / abs(mdd) if mdd < 0 else None
    return BacktestMetrics(
        ar=ar, sr=sr, cr=cr, mdd=mdd, returns=returns, drawdowns=drawdowns,
        sr_undefined=sigma == 0, cr_undefined=mdd == 0,
    )


# -- (p, q, r) grid search ----------------------------------------------------------


def _grid(lo: int, hi: int) -> list:
    return [round(0.05 * i, 2) for i in range(lo, hi + 1)]


DEFAULT_P_GRID = _grid(1, 20)  # 0.05 .. 1.00
DEFAULT_Q_GRID = _grid(1, 19)  # 0.05 .. 0.95
DEFAULT_R_GRID = _grid(0, 20)  # 0.00 .. 1.00


@dataclass
class GridSearchResult:
    params: StrategyParams
    metrics: BacktestMetrics


def grid_search(
    predictions: np.ndarray,
    prices: np.ndarray,
    base: StrategyParams | None = None,
    p_grid=None,
    q_grid=None,
    r_grid=None,
) -> GridSearchResult:
    """Exhaustive Sharpe maximization over the strategy grid.

    Undefined-Sharpe points rank last; ties prefer higher annual return,
    then the lexicographically smallest (p, q, r).
    """
    base = base or StrategyParams()
    p_grid = DEFAULT_P_GRID if p_grid is None else list(p_grid)
    q_grid = DEFAULT_Q_GRID if q_grid is None else list(q_grid)
    r_grid = DEFAULT_R_GRID if r_grid is None else list(r_grid)
    if not p_grid or not q_grid or not r_grid:
        raise ValueError("empty strategy grid")
    best = None
    best_key = None
    for p in p_grid:
        for q in q_grid:
            for r in r_grid:
                params = replace(base, p=p, q=q, r=r)
                state = run_backtest(predictions, prices, params)
                metrics = backtest_metrics(np.array(state.values))
                key = (
                    metrics.sr is not None,
                    metrics.sr if metrics.sr is not None else -math.inf,
                    metrics.ar,
                )
                if best_key is None or key > best_key:  # strict: first wins ties
                    best_key = key
                    best = GridSearchResult(params=params, metrics=metrics)
    return best


# -- files -----------------------------------------------------------------------------


def load_predictions(path: str):
    """Read a date,ticker,prob_up CSV into (dates, tickers, probs[days, N])."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["date", "ticker", "prob_up"]:
            raise ValueError(f"{path}: header must be date,ticker,prob_up")
        cells = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields")
            date, ticker, raw = row
            if (date, ticker) in cells:
                raise ValueError(f"{path}:{lineno}: duplicate ({date}, {ticker})")
            prob = float(raw)
            if not 0 <= prob <= 1:
                raise ValueError(f"{path}:{lineno}: prob_up {prob} outside [0, 1]")
            cells[(date, ticker)] = prob
    if not cells:
        raise ValueError(f"{path}: no data rows")
    dates = sorted({d for d, _ in cells})
    tickers = sorted({t for _, t in cells})
    probs = np.empty((len(dates), len(tickers)))
    for i, d in enumerate(dates):
        for j, t in enumerate(tickers):
            if (d, t) not in cells:
                raise ValueError(f"{path}: missing cell ({d}, {t})")
            probs[i, j] = cells[(d, t)]
    return dates, tickers, probs


def write_equity_curve(path: str, dates, values, metrics: BacktestMetrics) -> None:
    """date,value,daily_return,drawdown rows; day 0 has return 0."""
    if len(dates) != len(values):
        raise ValueError(f"{len(dates)} dates vs {len(values)} values")
    returns = [0.0, *metrics.returns]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "value", "daily_return", "drawdown"])
        for date, value, ret, dd in zip(dates, values, returns, metrics.drawdowns):
            writer.writerow([date, repr(float(value)), repr(float(ret)), repr(float(dd))])


def write_trade_log(path: str, trades, dates=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", "date", "ticker", "side", "shares", "price", "cost"])
        for t in trades:
            date = dates[t.day] if dates else ""
            writer.writerow([t.day, date, t.ticker, t.side, repr(t.shares),
                             repr(t.price), repr(t.cost)])


def metrics_report(cls: ClassificationMetrics, bt: BacktestMetrics) -> dict:
    """The combined metrics payload; key set is part of the CLI contract."""
    return {
        "AR": bt.ar,
        "SR": bt.sr,
        "CR": bt.cr,
        "MDD": bt.mdd,
        "ACC": cls.acc,
        "PRE": cls.pre,
        "REC": cls.rec,
        "F1": cls.f1,
        "AUC": cls.auc,
        "flags": {
            "sr_undefined": bt.sr_undefined,
            "cr_undefined": bt.cr_undefined,
            "auc_degenerate": cls.auc_degenerate,
        },
    }


def write_metrics_json(path: str, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

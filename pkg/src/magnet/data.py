"""Market panel plumbing: CSV ingestion, next-day direction labels,
chronological splitting with per-split normalization, and a synthetic
planted-pattern generator used by the learnability tests.

Panels hold plain float64 arrays, not autodiff tensors; nothing here is
differentiated. The close column is kept twice on purpose: raw closes feed
labels and the backtest, while the feature copy gets normalized away."""

from __future__ import annotations

import csv
import datetime
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

# Base columns of the canonical long-format CSV. Extra feature columns may
# follow; only date, ticker and close are structurally required.
BASE_HEADER = ("date", "ticker", "open", "high", "low", "close", "volume")
PRICE_COLUMNS = ("open", "high", "low", "close")

STD_FLOOR = 1e-8


@dataclass
class MarketPanel:
    """Dense stocks-by-days panel with raw closes kept separately."""

    tickers: list[str]
    dates: list[str]
    features: np.ndarray  # (N, T_total, F)
    closes: np.ndarray  # (N, T_total), raw prices
    feature_names: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.closes = np.asarray(self.closes, dtype=np.float64)
        n, t = len(self.tickers), len(self.dates)
        if self.features.shape != (n, t, len(self.feature_names)):
            raise ValueError(
                f"features shape {self.features.shape} != "
                f"({n}, {t}, {len(self.feature_names)})"
            )
        if self.closes.shape != (n, t):
            raise ValueError(f"closes shape {self.closes.shape} != ({n}, {t})")
        if len(set(self.tickers)) != n:
            raise ValueError("duplicate tickers")
        if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
            raise ValueError("dates must be strictly increasing")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature values")
        if not np.all(self.closes > 0):
            raise ValueError("closes must be strictly positive")

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        if min(self.train, self.val, self.test) <= 0:
            raise ValueError("split fractions must be positive")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


@dataclass
class PanelSplits:
    train: MarketPanel
    val: MarketPanel
    test: MarketPanel


def load_panel(path: str) -> MarketPanel:
    """Read a long-format CSV into a dense panel.

    The panel covers the intersection of dates present for every ticker;
    tickers are ordered lexicographically. Duplicate (date, ticker) rows
    and non-positive prices are rejected.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if header[:2] != ["date", "ticker"] or "close" not in header[2:]:
            raise ValueError(
                f"{path}: header must start with date,ticker and include close"
            )
        feature_names = header[2:]
        close_idx = feature_names.index("close")
        price_idx = [feature_names.index(c) for c in PRICE_COLUMNS if c in feature_names]

        cells: dict[tuple[str, str], np.ndarray] = {}
        per_ticker_dates: dict[str, set] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            date, ticker = row[0], row[1]
            try:
                values = np.array([float(v) for v in row[2:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric feature value") from None
            if not np.all(np.isfinite(values)):
                raise ValueError(f"{path}:{lineno}: non-finite feature value")
            for j in price_idx:
                if values[j] <= 0:
                    raise ValueError(
                        f"{path}:{lineno}: non-positive {feature_names[j]} "
                        f"for ({date}, {ticker})"
                    )
            if (date, ticker) in cells:
                raise ValueError(f"{path}:{lineno}: duplicate row for ({date}, {ticker})")
            cells[(date, ticker)] = values
            per_ticker_dates.setdefault(ticker, set()).add(date)

    if not cells:
        raise ValueError(f"{path}: no data rows")
    tickers = sorted(per_ticker_dates)
    shared = set.intersection(*per_ticker_dates.values())
    dates = sorted(shared)
    if not dates:
        raise ValueError(f"{path}: no date shared by all tickers")

    features = np.empty((len(tickers), len(dates), len(feature_names)))
    for i, ticker in enumerate(tickers):
        for t, date in enumerate(dates):
            features[i, t] = cells[(date, ticker)]
    return MarketPanel(
        tickers=tickers,
        dates=dates,
        features=features,
        closes=features[:, :, close_idx].copy(),
        feature_names=feature_names,
    )


def save_panel(panel: MarketPanel, path: str) -> None:
    """Write the canonical CSV plus a JSON manifest at <path>.manifest.json.

    Floats are written with repr() so that load_panel round-trips bitwise.
    """
    if "close" not in panel.feature_names:
        raise ValueError("panel has no close feature column; cannot save")
    close_idx = panel.feature_names.index("close")
    if not np.array_equal(panel.features[:, :, close_idx], panel.closes):
        raise ValueError("close feature diverges from raw closes (normalized panel?)")

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "ticker", *panel.feature_names])
        for t, date in enumerate(panel.dates):
            for i, ticker in enumerate(panel.tickers):
                writer.writerow(
                    [date, ticker, *(repr(float(v)) for v in panel.features[i, t])]
                )
    with open(path, "rb") as fh:
        checksum = hashlib.sha256(fh.read()).hexdigest()
    manifest = {
        "n_stocks": panel.n_stocks,
        "n_days": panel.n_days,
        "n_features": panel.n_features,
        "feature_names": panel.feature_names,
        "sha256": checksum,
        **panel.meta,
    }
    with open(path + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def make_labels(closes: np.ndarray) -> np.ndarray:
    """Next-day direction: 1 iff tomorrow's close strictly exceeds today's."""
    closes = np.asarray(closes)
    if closes.ndim != 2 or closes.shape[1] < 2:
        raise ValueError(f"need (N, T>=2) closes, got shape {closes.shape}")
    return (closes[:, 1:] > closes[:, :-1]).astype(np.int64)


def _slice_panel(panel: MarketPanel, lo: int, hi: int) -> MarketPanel:
    return MarketPanel(
        tickers=panel.tickers,
        dates=panel.dates[lo:hi],
        features=panel.features[:, lo:hi].copy(),
        closes=panel.closes[:, lo:hi].copy(),
        feature_names=panel.feature_names,
    )


def split_and_normalize(
    panel: MarketPanel, spec: SplitSpec | None = None, pooling: str = "pooled"
) -> PanelSplits:
    """Chronological split, then z-score each split with its own statistics.

    Date counts are floored per fraction; remainder days go to train. With
    "pooled" the mean/std pool all stocks and days of the split per feature;
    "per_stock" keeps a separate statistic per stock. Raw closes pass
    through untouched.
    """
    if pooling not in ("pooled", "per_stock"):
        raise ValueError(f"unknown pooling {pooling!r}")
    spec = spec or SplitSpec()
    t = panel.n_days
    n_val = int(t * spec.val)
    n_test = int(t * spec.test)
    n_train = t - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(
            f"{t} days cannot fill splits {spec.train}:{spec.val}:{spec.test}"
        )
    bounds = (0, n_train, n_train + n_val, t)
    out = []
    for lo, hi in zip(bounds, bounds[1:]):
        sub = _slice_panel(panel, lo, hi)
        axes = (0, 1) if pooling == "pooled" else 1
        mean = sub.features.mean(axis=axes, keepdims=True)
        std = sub.features.std(axis=axes, keepdims=True)
        sub.features = (sub.features - mean) / np.maximum(std, STD_FLOOR)
        out.append(sub)
    return PanelSplits(*out)


def synth_panel(
    n_stocks: int,
    n_days: int,
    n_features: int,
    seed: int,
    noise: float = 0.05,
    delta: float = 0.01,
) -> MarketPanel:
    """Generate a panel whose next-day directions follow a planted rule.

    Direction of stock i on day t is sign(w . x_i,t - thresh + noise * eps)
    where x is the block of predictor features, w a fixed random functional
    and thresh the median score (labels balance near 50%). The close moves
    by a factor (1 +/- delta) accordingly. The achieved accuracy of the
    noiseless rule is recorded in panel.meta; at the default noise it stays
    above 95%.
    """
    if n_stocks < 1 or n_days < 2 or n_features < 2:
        raise ValueError(
            f"degenerate panel size ({n_stocks}, {n_days}, {n_features})"
        )
    if noise < 0 or not 0 < delta < 1:
        raise ValueError(f"need noise >= 0 and 0 < delta < 1, got {noise}, {delta}")
    rng = np.random.default_rng(seed)
    n_pred = n_features - 1  # feature 0 is the close itself
    w = rng.normal(size=n_pred)
    predictors = rng.normal(size=(n_stocks, n_days, n_pred))

    scores = predictors[:, :-1] @ w  # decisions for moves t -> t+1
    thresh = float(np.median(scores))
    eps = rng.normal(size=scores.shape)
    sigma = noise * float(scores.std())
    up = scores - thresh + sigma * eps > 0

    closes = np.empty((n_stocks, n_days))
    closes[:, 0] = rng.uniform(50.0, 150.0, size=n_stocks)
    for t in range(n_days - 1):
        closes[:, t + 1] = closes[:, t] * np.where(up[:, t], 1.0 + delta, 1.0 - delta)

    features = np.concatenate([closes[:, :, None], predictors], axis=2)
    start = datetime.date(2020, 1, 1)
    dates = [(start + datetime.timedelta(days=t)).isoformat() for t in range(n_days)]
    tickers = [f"S{i:03d}" for i in range(n_stocks)]
    planted_acc = float(np.mean((scores > thresh) == up))
    return MarketPanel(
        tickers=tickers,
        dates=dates,
        features=features,
        closes=closes,
        feature_names=["close"] + [f"x{j}" for j in range(n_pred)],
        meta={
            "generator": "planted-linear-threshold",
            "seed": seed,
            "noise": noise,
            "delta": delta,
            "threshold": thresh,
            "planted_rule_accuracy": planted_acc,
        },
    )

"""Command-line entry point wiring the whole pipeline.

Subcommands: synth, train, backtest, gridsearch, verify. Configuration is
a JSON file of nested sections; every field has a default, unknown keys
are rejected before any computation, and overrides follow the precedence
--seed flag > MAGNET_SEED > --set flags > file. All randomness flows from
the single seed field. Exit codes: 0 success, 1 validation failure, 2
runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .backtest import (
    StrategyParams,
    backtest_metrics,
    classification_metrics,
    grid_search,
    metrics_report,
    run_backtest,
    write_equity_curve,
    write_metrics_json,
    write_trade_log,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SplitSpec, load_panel, save_panel, split_and_normalize, synth_panel
from .model import ModelConfig, TrainConfig, day_windows, forward, train
from .verify import format_report, run_all_checks

ABLATABLE = ("mage", "f2d", "tch", "gph")


def _defaults_of(dc, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(dc):
        if f.name in skip:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


# Section defaults mirror the dataclasses so the schema cannot drift from
# the code. Fields without defaults (panel dimensions) are derived at run
# time, never configured; the seed lives once at top level.
_SCHEMA = {
    "seed": 0,
    "pooling": "pooled",
    "model": _defaults_of(ModelConfig, skip=("seed",)),
    "train": _defaults_of(TrainConfig),
    "strategy": _defaults_of(StrategyParams),
    "synth": {
        "n_stocks": 8,
        "n_days": 400,
        "n_features": 5,
        "noise": 0.05,
        "delta": 0.01,
    },
    "split": _defaults_of(SplitSpec),
    "grid": {"p": None, "q": None, "r": None},
    "paths": {
        "panel": "panel.csv",
        "checkpoint": "model.ckpt",
        "history": "history.csv",
        "equity": "equity.csv",
        "trades": "trades.csv",
        "metrics": "metrics.json",
        "grid_result": "gridsearch.json",
    },
}


@dataclass
class RunConfig:
    seed: int
    pooling: str
    model: dict
    train: dict
    strategy: dict
    synth: dict
    split: dict
    grid: dict
    paths: dict


def _coerce(label: str, default, value):
    """Validate a config value against the type of its default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{label} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ValueError(f"{label} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ValueError(f"{label} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"{label} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{label} must be a list, got {value!r}")
        return tuple(float(v) for v in value)
    if default is None:  # grid axes: null or a list of numbers
        if value is None:
            return None
        if not isinstance(value, (list, tuple)) or not value:
            raise ValueError(f"{label} must be null or a non-empty list")
        return [float(v) for v in value]
    raise ValueError(f"{label}: unsupported config field")


def _merge_section(name: str, defaults: dict, given) -> dict:
    if not isinstance(given, dict):
        raise ValueError(f"config section {name!r} must be an object")
    out = dict(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ValueError(f"unknown config key {name}.{key}")
        out[key] = _coerce(f"{name}.{key}", defaults[key], value)
    return out


def _parse_override(text: str):
    if "=" not in text:
        raise ValueError(f"--set needs key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings may come unquoted
    return key.strip(), value


def load_run_config(path=None, seed=None, overrides=()) -> RunConfig:
    """Build the validated run configuration from file, env and flags."""
    raw = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ValueError("config root must be a JSON object")
    for key in raw:
        if key not in _SCHEMA:
            raise ValueError(f"unknown config key {key}")

    cfg = {}
    for key, default in _SCHEMA.items():
        if isinstance(default, dict):
            cfg[key] = _merge_section(key, default, raw.get(key, {}))
        else:
            cfg[key] = _coerce(key, default, raw.get(key, default))

    env_seed = os.environ.get("MAGNET_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as exc:
            raise ValueError(f"MAGNET_SEED must be an integer, got {env_seed!r}") from exc

    for text in overrides:
        key, value = _parse_override(text)
        if "." in key:
            section, field = key.split(".", 1)
            if section not in _SCHEMA or not isinstance(_SCHEMA[section], dict):
                raise ValueError(f"unknown config section {section!r}")
            if field not in _SCHEMA[section]:
                raise ValueError(f"unknown config key {section}.{field}")
            cfg[section][field] = _coerce(key, _SCHEMA[section][field], value)
        else:
            if key not in _SCHEMA or isinstance(_SCHEMA[key], dict):
                raise ValueError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, _SCHEMA[key], value)

    if seed is not None:
        cfg["seed"] = seed
    return RunConfig(**cfg)


def model_config(run: RunConfig, n_stocks: int, n_features: int) -> ModelConfig:
    return ModelConfig(
        n_stocks=n_stocks, n_features=n_features, seed=run.seed, **run.model
    )


def train_config(run: RunConfig) -> TrainConfig:
    return TrainConfig(**run.train)


def strategy_params(run: RunConfig) -> StrategyParams:
    return StrategyParams(**run.strategy)


def split_spec(run: RunConfig) -> SplitSpec:
    return SplitSpec(**run.split)


def _predict(panel, config: ModelConfig, params):
    """Up-probabilities and labels for every day window of a split."""
    probs, labels = [], []
    with tz.no_grad():
        for _, x, lab in day_windows(panel, config.window):
            out = forward(x, config, params)
            probs.append(out.data[:, 1].copy())
            labels.append(lab)
    return np.array(probs), np.array(labels)


# -- subcommands -------------------------------------------------------------------


def cmd_synth(run: RunConfig, args) -> int:
    s = run.synth
    window = run.model["window"]
    if s["n_days"] < window + 2:
        raise ValueError(
            f"synth.n_days={s['n_days']} too short for lookback {window}: "
            f"need at least {window + 2}"
        )
    panel = synth_panel(
        s["n_stocks"], s["n_days"], s["n_features"],
        seed=run.seed, noise=s["noise"], delta=s["delta"],
    )
    save_panel(panel, run.paths["panel"])
    print(
        f"wrote {run.paths['panel']}: {panel.n_stocks} stocks x "
        f"{panel.n_days} days x {panel.n_features} features"
    )
    return 0


def cmd_train(run: RunConfig, args) -> int:
    model_overrides = dict(run.model)
    for name in getattr(args, "ablate", None) or ():
        model_overrides[f"use_{name}"] = False
    run = dataclasses.replace(run, model=model_overrides)

    panel = load_panel(run.paths["panel"])
    splits = split_and_normalize(panel, split_spec(run), pooling=run.pooling)
    mcfg = model_config(run, panel.n_stocks, panel.n_features)
    start = None
    if getattr(args, "resume", False):
        _, start = load_checkpoint(run.paths["checkpoint"], expected_config=mcfg)
    params, history = train(splits, mcfg, train_config(run), params=start)
    save_checkpoint(run.paths["checkpoint"], mcfg, params)
    with open(run.paths["history"], "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_accuracy\n")
        for row in history:
            fh.write(
                f"{row['epoch']},{row['train_loss']!r},{row['val_accuracy']!r}\n"
            )
    best = max(row["val_accuracy"] for row in history)
    print(
        f"trained {len(history)} epochs, best val accuracy {best:.4f}, "
        f"checkpoint {run.paths['checkpoint']}"
    )
    return 0


def cmd_backtest(run: RunConfig, args) -> int:
    mcfg, params = load_checkpoint(run.paths["checkpoint"])
    panel = load_panel(run.paths["panel"])
    if (panel.n_stocks, panel.n_features) != (mcfg.n_stocks, mcfg.n_features):
        raise ValueError(
            f"panel is {panel.n_stocks} stocks x {panel.n_features} features, "
            f"checkpoint expects {mcfg.n_stocks} x {mcfg.n_features}"
        )
    splits = split_and_normalize(panel, split_spec(run), pooling=run.pooling)
    test = splits.test
    preds, labels = _predict(test, mcfg, params)
    prices = test.closes[:, mcfg.window - 1 :].T.copy()
    state = run_backtest(preds, prices, strategy_params(run), tickers=test.tickers)
    cls = classification_metrics(preds.ravel(), labels.ravel())
    bt = backtest_metrics(np.array(state.values))
    dates = test.dates[mcfg.window - 1 :]
    write_equity_curve(run.paths["equity"], dates, state.values, bt)
    write_trade_log(run.paths["trades"], state.trades, dates=dates)
    write_metrics_json(run.paths["metrics"], metrics_report(cls, bt))
    sr = "undefined" if bt.sr is None else f"{bt.sr:.4f}"
    print(
        f"backtest over {len(preds)} days: ACC {cls.acc:.4f}, "
        f"AR {bt.ar:.4f}, SR {sr}, MDD {bt.mdd:.4f}"
    )
    return 0


def cmd_gridsearch(run: RunConfig, args) -> int:
    mcfg, params = load_checkpoint(run.paths["checkpoint"])
    panel = load_panel(run.paths["panel"])
    if (panel.n_stocks, panel.n_features) != (mcfg.n_stocks, mcfg.n_features):
        raise ValueError(
            f"panel is {panel.n_stocks} stocks x {panel.n_features} features, "
            f"checkpoint expects {mcfg.n_stocks} x {mcfg.n_features}"
        )
    splits = split_and_normalize(panel, split_spec(run), pooling=run.pooling)
    val = splits.val  # strategy tuning stays off the test split
    preds, _ = _predict(val, mcfg, params)
    prices = val.closes[:, mcfg.window - 1 :].T.copy()
    result = grid_search(
        preds, prices, base=strategy_params(run),
        p_grid=run.grid["p"], q_grid=run.grid["q"], r_grid=run.grid["r"],
    )
    payload = {
        "p": result.params.p,
        "q": result.params.q,
        "r": result.params.r,
        "SR": result.metrics.sr,
        "AR": result.metrics.ar,
        "MDD": result.metrics.mdd,
        "flags": {
            "sr_undefined": result.metrics.sr_undefined,
            "cr_undefined": result.metrics.cr_undefined,
        },
    }
    with open(run.paths["grid_result"], "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    sr = "undefined" if result.metrics.sr is None else f"{result.metrics.sr:.4f}"
    print(
        f"best (p, q, r) = ({result.params.p}, {result.params.q}, "
        f"{result.params.r}): SR {sr}, AR {result.metrics.ar:.4f}"
    )
    return 0


def cmd_verify(run: RunConfig, args) -> int:
    results = run_all_checks(run.seed)
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="magnet",
        description="Stock movement prediction and daily trading backtest.",
    )
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="override every seed source")
    parser.add_argument(
        "--set", dest="overrides", action="append", metavar="KEY=VALUE",
        help="override one config field, e.g. --set train.lr=0.001",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate the planted synthetic panel")
    p_train = sub.add_parser("train", help="train and checkpoint a model")
    p_train.add_argument(
        "--ablate", action="append", choices=ABLATABLE,
        help="disable one stage (repeatable)",
    )
    p_train.add_argument(
        "--resume", action="store_true",
        help="continue from the existing checkpoint (config must match)",
    )
    sub.add_parser("backtest", help="run the trading simulation on the test split")
    sub.add_parser("gridsearch", help="tune (p, q, r) on the validation split")
    sub.add_parser("verify", help="run the numerical invariant suite")
    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "backtest": cmd_backtest,
    "gridsearch": cmd_gridsearch,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        run = load_run_config(args.config, seed=args.seed,
                              overrides=args.overrides or ())
        return _HANDLERS[args.command](run, args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

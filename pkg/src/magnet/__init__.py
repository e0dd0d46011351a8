"""Stock movement prediction with gated bidirectional state-space blocks,
2D spatiotemporal attention and hypergraph convolutions, plus the daily
top-n trading backtest that consumes the predictions."""

__version__ = "0.1.0"

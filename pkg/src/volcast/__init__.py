"""Deep stochastic volatility model with GARCH-family baselines."""

__version__ = "0.1.0"

"""Deep partial least squares: PLS projections composed with a feedforward score map."""

__version__ = "0.1.0"

from . import baselines, backtest, data, deepnet, dpls, errors, pls  # noqa: E402,F401

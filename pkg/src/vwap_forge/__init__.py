"""Neural VWAP execution: sequential volume allocation driven by recurrent
(LSTM or TKAN) features, trained directly on execution slippage."""

__version__ = "0.1.0"

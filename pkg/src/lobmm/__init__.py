"""Market making on a limit order book with a Markov-modulated spread."""

from .model import MarketModel, reference_model
from .solver import PolicyTable, SolverGrid, SolverParams, solve
from .simulator import SimConfig, Strategy, run_backtest

__all__ = [
    "MarketModel",
    "PolicyTable",
    "SimConfig",
    "SolverGrid",
    "SolverParams",
    "Strategy",
    "reference_model",
    "run_backtest",
    "solve",
]

"""Risk-aware peer-to-peer energy trading: market model, equilibrium solvers and contracts."""

__version__ = "0.1.0"

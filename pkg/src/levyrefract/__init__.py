"""Simulation and Monte Carlo estimation for rate-bounded dividend control
with capital injection under two-sided jump diffusions."""

from . import levy_model, path_engine, strategy_engine, estimation, properties_oracle, cli_reporting

__all__ = [
    "levy_model",
    "path_engine",
    "strategy_engine",
    "estimation",
    "properties_oracle",
    "cli_reporting",
]
__version__ = "0.1.0"

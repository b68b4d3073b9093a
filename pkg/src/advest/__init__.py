"""Partial generalized advantage estimation: estimators, oracles and a PPO trainer."""

__version__ = "0.1.0"

"""Reinforcement-learning active feature acquisition over view slots."""

__version__ = "0.1.0"

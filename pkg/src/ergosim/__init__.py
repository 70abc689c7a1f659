"""Receding-horizon ergodic coverage and target localization simulator."""

__version__ = "0.1.0"

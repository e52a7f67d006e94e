"""Offline safe RL by behaviour cloning on cost-realigned trajectories."""

__version__ = "0.1.0"

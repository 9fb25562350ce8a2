"""Detect who is speaking in a crowd from video trajectories and wearable acceleration."""

__version__ = "0.1.0"

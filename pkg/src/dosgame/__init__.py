"""Desk-scale adversarial RL lab for low-rate DoS attacks against learned traffic detectors."""

__version__ = "0.1.0"

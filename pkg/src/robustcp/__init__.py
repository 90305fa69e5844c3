"""Conformal prediction under adversarial attack: OPSA, OPSA-AT, THR calibration and metrics."""

__version__ = "0.1.0"

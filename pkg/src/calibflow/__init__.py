"""Calibration metrics, miscalibration simulations and conditional graph normalizing flows."""

__version__ = "0.1.0"

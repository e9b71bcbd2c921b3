"""Online change-point detection for multi-entity sensor streams.

Per-entity autoencoder reconstruction errors are aggregated across entities,
accumulated in a CUSUM, and tested against an adaptive KDE density threshold.
"""
__version__ = "0.1.0"

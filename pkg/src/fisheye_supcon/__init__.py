"""Distortion-aware supervised contrastive pre-training for fisheye object
patches, with synthetic data, naturalness statistics and probes."""

__version__ = "0.1.0"

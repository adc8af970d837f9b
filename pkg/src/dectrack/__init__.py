"""Decentralized multi-sensor pedestrian tracking with orientation-binned galleries."""

from .core import Detection, Identity, RunConfig, TorsoKeypoints, validate_config

__version__ = "0.1.0"

__all__ = ["Detection", "Identity", "RunConfig", "TorsoKeypoints", "validate_config"]

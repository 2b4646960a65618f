"""Rectified-rejection laboratory: two-head networks, coupled rejection metrics
and the machinery to train, attack and score them at desk scale."""

__version__ = "0.1.0"

"""Numpy point tracker: sampled-key deformable attention with an
attention-driven position update, trained on synthetic sprite videos."""

__version__ = "0.1.0"

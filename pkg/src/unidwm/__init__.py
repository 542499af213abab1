"""Unified driving world model at desk scale.

Multi-view toy observations are tokenized into a bird's-eye-view grid, read by
a small causal transformer that answers a scene prompt, and decoded into
current and future LiDAR point clouds through an SDF volume renderer.
"""
__version__ = "0.1.0"

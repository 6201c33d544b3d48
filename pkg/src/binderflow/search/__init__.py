"""Inference-time search over denoising trajectories."""

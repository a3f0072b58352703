"""Conformal OOD gating with a physics-consistent GP fallback for
space-time trajectory forecasting."""

__version__ = "0.1.0"

"""Dual-head keratoconus classifier on corneal topography heatmaps, with a
synthetic topography generator and two-stage transfer-learning pipeline."""

__version__ = "0.1.0"

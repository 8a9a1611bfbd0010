"""Editable point-based neural radiance fields: synthetic scenes, rigid and
non-rigid point edits, neural-point resampling, differentiable rendering and
per-scene fine-tuning."""

__version__ = "0.1.0"

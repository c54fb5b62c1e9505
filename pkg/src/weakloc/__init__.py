"""Weakly-supervised multimodal temporal localisation.

Trains a gated cross-modal fusion network from video-level labels only and
evaluates it at frame level. Subpackages: numerics (autodiff core),
datamodel (sample formats, alignment, synthetic streams), model (encoders,
gates, fusion), losses, metrics, trainer, cli.
"""

__version__ = "0.1.0"

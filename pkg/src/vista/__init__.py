"""Variance-gated inter-sequence test-time adaptation for multi-sequence volumes."""

from .config import ModelConfig, VistaConfig

__all__ = ["ModelConfig", "VistaConfig"]
__version__ = "0.1.0"

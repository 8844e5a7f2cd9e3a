"""Analytic simulator for large-transformer inference: cost models, kernel
schedules, pipeline and MoE routing, and weight-streaming plans."""

from .config import ConfigError, load_model, load_topology
from .model import ModelConfig, MoEConfig, SeqWorkload

__version__ = "0.1.0"

__all__ = ["ConfigError", "ModelConfig", "MoEConfig", "SeqWorkload", "load_model", "load_topology"]

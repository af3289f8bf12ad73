"""Diversity-aware channel pruning for small StyleGAN2-style generators."""

from .synthnet import Generator, GeneratorConfig, count_flops, count_params, init_generator

__all__ = ["Generator", "GeneratorConfig", "count_flops", "count_params", "init_generator"]
__version__ = "0.1.0"

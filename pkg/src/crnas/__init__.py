"""Robustness-aware neural architecture search with merged evaluations and a surrogate."""
from .genome import GENOME_LENGTH, OPS, decode, parse, random_genome, to_text, validate

__version__ = "0.1.0"

__all__ = ["GENOME_LENGTH", "OPS", "decode", "parse", "random_genome", "to_text", "validate", "__version__"]

"""Pipeline-parallel schedule laboratory for long-context transformer training."""

__version__ = "0.1.0"

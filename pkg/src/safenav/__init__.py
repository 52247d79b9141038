"""Safe, attention-based multi-task TD3 for unsignalized intersection crossing."""

__version__ = "0.1.0"

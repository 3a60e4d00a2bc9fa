"""Energy-based model training with bidirectional likelihood bounds."""

__version__ = "0.1.0"

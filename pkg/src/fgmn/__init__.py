"""Factor-graph inference and learning for molecule structure prediction."""

__version__ = "0.1.0"

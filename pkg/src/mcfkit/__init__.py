"""Multi-arm causal machine learning: modified causal forest, policy trees, clustering."""

__version__ = "0.1.0"

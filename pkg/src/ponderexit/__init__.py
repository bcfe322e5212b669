"""Early-exit classifiers with a learned distribution over exit layers."""

__version__ = "0.1.0"

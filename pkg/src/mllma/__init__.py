"""Layout congestion feature-evolution toolkit."""

__version__ = "0.1.0"

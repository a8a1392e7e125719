"""Model ownership verification from membership-inference leakage fingerprints."""

__version__ = "0.1.0"

"""Certified-robust counterfactual explanations via joint training."""

__version__ = "0.1.0"
